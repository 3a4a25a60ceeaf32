//! Recovers scene attributes mentioned in a caption, using the caption
//! template lexicon. Anything off-lexicon is simply not extracted.

use crate::scene::{BedColor, BedSize, SceneSpec, WallColor, WindowSide};
use crate::text::tokenize;

pub const ATTRIBUTES: [&str; 5] = ["wall_color", "bed_color", "bed_size", "window_side", "rug"];
pub const CLASSES: [usize; 5] = [5, 5, 2, 3, 2];

/// Attribute values a caption commits to; `None` when unmentioned or
/// mentioned inconsistently.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Mentioned {
    pub wall_color: Option<WallColor>,
    pub bed_color: Option<BedColor>,
    pub bed_size: Option<BedSize>,
    pub window_side: Option<WindowSide>,
    pub rug: Option<bool>,
}

impl Mentioned {
    /// Class indices in [`ATTRIBUTES`] order.
    pub fn labels(&self) -> [Option<usize>; 5] {
        [
            self.wall_color.map(WallColor::index),
            self.bed_color.map(BedColor::index),
            self.bed_size.map(BedSize::index),
            self.window_side.map(WindowSide::index),
            self.rug.map(usize::from),
        ]
    }

    pub fn is_empty(&self) -> bool {
        self.labels().iter().all(Option::is_none)
    }

    /// True when every mentioned value agrees with `spec`.
    pub fn consistent_with(&self, spec: &SceneSpec) -> bool {
        self.labels().iter().zip(spec.labels()).all(|(m, s)| m.is_none_or(|m| m == s))
    }
}

/// Keeps a value only if every mention agrees.
struct Vote<T>(Option<Option<T>>);

impl<T: PartialEq + Copy> Vote<T> {
    fn add(&mut self, v: T) {
        self.0 = match self.0 {
            None => Some(Some(v)),
            Some(Some(prev)) if prev == v => Some(Some(v)),
            Some(_) => Some(None),
        };
    }

    fn get(&self) -> Option<T> {
        self.0.flatten()
    }
}

pub fn parse_attributes(caption: &str) -> Mentioned {
    let t = tokenize(caption);
    let at = |i: usize| t.get(i).map(String::as_str);
    let (mut wall, mut bed, mut size, mut window, mut rug) =
        (Vote(None), Vote(None), Vote(None), Vote(None), Vote(None));
    for i in 0..t.len() {
        match t[i].as_str() {
            "walls" => {
                if let Some(c) = i.checked_sub(1).and_then(|j| WallColor::from_word(&t[j])) {
                    wall.add(c);
                }
            }
            "bed" => {
                if let Some(c) = i.checked_sub(1).and_then(|j| BedColor::from_word(&t[j])) {
                    bed.add(c);
                    if let Some(s) = i.checked_sub(2).and_then(|j| BedSize::from_word(&t[j])) {
                        size.add(s);
                    }
                }
            }
            "window" => {
                if i > 0 && t[i - 1] == "no" {
                    window.add(WindowSide::None);
                } else if at(i + 1) == Some("on") && at(i + 2) == Some("the") {
                    match at(i + 3) {
                        Some("left") => window.add(WindowSide::Left),
                        Some("right") => window.add(WindowSide::Right),
                        _ => {}
                    }
                }
            }
            "rug" if i > 0 && t[i - 1] == "dark" => rug.add(true),
            "floor" if i > 0 && t[i - 1] == "bare" => rug.add(false),
            _ => {}
        }
    }
    Mentioned {
        wall_color: wall.get(),
        bed_color: bed.get(),
        bed_size: size.get(),
        window_side: window.get(),
        rug: rug.get(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{fill_template, DEGENERATE_CAPTION, TEMPLATES};

    #[test]
    fn every_template_caption_parses_without_false_extractions() {
        for spec in SceneSpec::all() {
            for t in TEMPLATES {
                let m = parse_attributes(&fill_template(t, &spec));
                assert!(m.consistent_with(&spec), "{t} {spec:?} -> {m:?}");
                assert_eq!(m.wall_color, Some(spec.wall_color));
                assert_eq!(m.bed_size, Some(spec.bed_size));
            }
        }
    }

    #[test]
    fn degenerate_caption_mentions_nothing() {
        assert!(parse_attributes(DEGENERATE_CAPTION).is_empty());
        assert!(parse_attributes("").is_empty());
    }

    #[test]
    fn conflicting_mentions_are_dropped() {
        let m = parse_attributes("red walls and blue walls with a large green bed");
        assert_eq!(m.wall_color, None);
        assert_eq!(m.bed_color, Some(BedColor::Green));
        assert_eq!(parse_attributes("a bedroom with blue walls").wall_color, Some(WallColor::Blue));
    }
}
