//! Procedural bedroom scenes, their template captions and the on-disk dataset.
//!
//! Every random choice goes through [`SplitMix64`] so a dataset is a pure
//! function of its configuration and can be regenerated anywhere.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use capgan_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

pub const SUPPORTED_RESOLUTIONS: [usize; 5] = [8, 16, 32, 64, 128];
pub const DEGENERATE_CAPTION: &str = "a bedroom with a bed";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
const CAPTION_STREAM: u64 = 0x6361_7074_696f_6e73;

/// The splitmix64 generator: a 64-bit counter pushed through a mixing function.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitMix64 {
    pub state: u64,
}

impl SplitMix64 {
    pub fn new(state: u64) -> Self {
        SplitMix64 { state }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        mix64(self.state)
    }

    /// Uniform in `0..n` by taking the high part of a 128-bit product.
    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent seed for sub-stream `tag` of `seed`.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    mix64(seed ^ mix64(tag.wrapping_add(0x9E37_79B9_7F4A_7C15)))
}

macro_rules! attribute {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self { $($name::$variant => $word),+ }
            }

            pub fn index(self) -> usize {
                self as usize
            }

            pub fn from_word(w: &str) -> Option<Self> {
                match w { $($word => Some($name::$variant),)+ _ => None }
            }
        }
    };
}

attribute!(WallColor { Red => "red", Green => "green", Blue => "blue", Yellow => "yellow", White => "white" });
attribute!(BedColor { Red => "red", Green => "green", Blue => "blue", Brown => "brown", White => "white" });
attribute!(BedSize { Small => "small", Large => "large" });
attribute!(WindowSide { Left => "left", Right => "right", None => "none" });

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneSpec {
    pub wall_color: WallColor,
    pub bed_color: BedColor,
    pub bed_size: BedSize,
    pub window_side: WindowSide,
    pub rug_present: bool,
}

impl SceneSpec {
    /// All 300 distinct scenes.
    pub fn all() -> Vec<SceneSpec> {
        let mut out = Vec::with_capacity(300);
        for &wall_color in WallColor::ALL {
            for &bed_color in BedColor::ALL {
                for &bed_size in BedSize::ALL {
                    for &window_side in WindowSide::ALL {
                        for rug_present in [false, true] {
                            out.push(SceneSpec { wall_color, bed_color, bed_size, window_side, rug_present });
                        }
                    }
                }
            }
        }
        out
    }

    /// Class index per attribute: wall, bed colour, bed size, window, rug.
    pub fn labels(&self) -> [usize; 5] {
        [
            self.wall_color.index(),
            self.bed_color.index(),
            self.bed_size.index(),
            self.window_side.index(),
            self.rug_present as usize,
        ]
    }
}

/// Draws one scene from `rng_state`; returns the scene and the advanced state.
pub fn sample_scene(rng_state: u64) -> (SceneSpec, u64) {
    let mut rng = SplitMix64::new(rng_state);
    let spec = SceneSpec {
        wall_color: WallColor::ALL[rng.below(WallColor::ALL.len())],
        bed_color: BedColor::ALL[rng.below(BedColor::ALL.len())],
        bed_size: BedSize::ALL[rng.below(2)],
        window_side: WindowSide::ALL[rng.below(3)],
        rug_present: rng.below(2) == 1,
    };
    (spec, rng.state)
}

pub type Rgb = [f32; 3];

pub fn wall_rgb(c: WallColor) -> Rgb {
    match c {
        WallColor::Red => [0.8, 0.1, 0.1],
        WallColor::Green => [0.1, 0.65, 0.2],
        WallColor::Blue => [0.15, 0.3, 0.85],
        WallColor::Yellow => [0.9, 0.85, 0.2],
        WallColor::White => [0.95, 0.95, 0.95],
    }
}

pub fn bed_rgb(c: BedColor) -> Rgb {
    match c {
        BedColor::Red => [0.8, 0.1, 0.1],
        BedColor::Green => [0.1, 0.65, 0.2],
        BedColor::Blue => [0.15, 0.3, 0.85],
        BedColor::Brown => [0.5, 0.3, 0.12],
        BedColor::White => [0.95, 0.95, 0.95],
    }
}

pub const FLOOR_RGB: Rgb = [0.5, 0.5, 0.5];
pub const WINDOW_FRAME_RGB: Rgb = [1.0, 1.0, 1.0];
pub const SKY_RGB: Rgb = [0.6, 0.8, 0.95];
pub const RUG_RGB: Rgb = [0.2, 0.15, 0.1];

// Layout in unit coordinates, x to the right and y downwards.
pub const WALL_BOTTOM: f64 = 0.6;
pub const BED_TOP: f64 = 0.64;
pub const BED_BOTTOM: f64 = 0.9;
pub const WINDOW_TOP: f64 = 0.12;
pub const WINDOW_SIZE: f64 = 0.24;
pub const WINDOW_FRAME: f64 = 0.03;

fn bed_span(size: BedSize) -> (f64, f64) {
    match size {
        BedSize::Large => (0.25, 0.75),
        BedSize::Small => (0.35, 0.65),
    }
}

fn window_left(side: WindowSide) -> Option<f64> {
    match side {
        WindowSide::Left => Some(0.12),
        WindowSide::Right => Some(0.64),
        WindowSide::None => None,
    }
}

/// Colour of the scene at unit coordinates `(x, y)`.
pub fn color_at(spec: &SceneSpec, x: f64, y: f64) -> Rgb {
    if y < WALL_BOTTOM {
        if let Some(left) = window_left(spec.window_side) {
            let (right, bottom) = (left + WINDOW_SIZE, WINDOW_TOP + WINDOW_SIZE);
            if (left..right).contains(&x) && (WINDOW_TOP..bottom).contains(&y) {
                let inner = x >= left + WINDOW_FRAME
                    && x < right - WINDOW_FRAME
                    && y >= WINDOW_TOP + WINDOW_FRAME
                    && y < bottom - WINDOW_FRAME;
                return if inner { SKY_RGB } else { WINDOW_FRAME_RGB };
            }
        }
        return wall_rgb(spec.wall_color);
    }
    let (bl, br) = bed_span(spec.bed_size);
    if (bl..br).contains(&x) && (BED_TOP..BED_BOTTOM).contains(&y) {
        return bed_rgb(spec.bed_color);
    }
    if spec.rug_present {
        let (dx, dy) = ((x - 0.13) / 0.1, (y - 0.8) / 0.05);
        if dx * dx + dy * dy <= 1.0 {
            return RUG_RGB;
        }
    }
    FLOOR_RGB
}

#[derive(Debug, Clone)]
pub struct RenderedScene {
    pub spec: SceneSpec,
    pub resolution: usize,
    /// `[3, R, R]`, values in `[-1, 1]`.
    pub image: Tensor<f32>,
}

/// Planar `[3, R, R]` pixels in `[-1, 1]`, sampled at pixel centres.
pub fn render_pixels(spec: &SceneSpec, resolution: usize) -> Result<Vec<f32>> {
    if !SUPPORTED_RESOLUTIONS.contains(&resolution) {
        return Err(Error::Config(format!(
            "unsupported resolution {resolution}; expected one of {SUPPORTED_RESOLUTIONS:?}"
        )));
    }
    let r = resolution;
    let mut out = vec![0.0f32; 3 * r * r];
    for row in 0..r {
        let y = (row as f64 + 0.5) / r as f64;
        for col in 0..r {
            let x = (col as f64 + 0.5) / r as f64;
            let rgb = color_at(spec, x, y);
            for ch in 0..3 {
                out[(ch * r + row) * r + col] = 2.0 * rgb[ch] - 1.0;
            }
        }
    }
    Ok(out)
}

pub fn render(spec: &SceneSpec, resolution: usize) -> Result<RenderedScene> {
    let data = render_pixels(spec, resolution)?;
    Ok(RenderedScene { spec: *spec, resolution, image: Tensor::from_vec(&[3, resolution, resolution], data)? })
}

pub fn window_phrase(side: WindowSide) -> &'static str {
    match side {
        WindowSide::Left => "a window on the left",
        WindowSide::Right => "a window on the right",
        WindowSide::None => "no window",
    }
}

pub fn rug_phrase(rug: bool) -> &'static str {
    if rug {
        "a dark rug"
    } else {
        "a bare floor"
    }
}

pub const TEMPLATES: [&str; 10] = [
    "a bedroom with {wall} walls and a {size} {bed} bed",
    "a {size} {bed} bed in a room with {wall} walls",
    "{wall} walls surround a {size} {bed} bed",
    "this bedroom has {wall} walls and a {size} {bed} bed",
    "a bedroom with {wall} walls, a {size} {bed} bed and {window}",
    "a room with {wall} walls, {rug} and a {size} {bed} bed",
    "a {size} {bed} bed against {wall} walls with {window}",
    "a {size} {bed} bed, {rug} and {wall} walls",
    "{wall} walls, {window} and a {size} {bed} bed",
    "there is a {size} {bed} bed and {rug} by {wall} walls",
];

pub fn fill_template(template: &str, spec: &SceneSpec) -> String {
    template
        .replace("{wall}", spec.wall_color.word())
        .replace("{size}", spec.bed_size.word())
        .replace("{bed}", spec.bed_color.word())
        .replace("{window}", window_phrase(spec.window_side))
        .replace("{rug}", rug_phrase(spec.rug_present))
}

/// `k` captions; each is a template caption with probability `diversity`
/// and the fixed degenerate caption otherwise.
pub fn caption_scene(spec: &SceneSpec, diversity: f64, rng_state: u64, k: usize) -> Vec<String> {
    let mut rng = SplitMix64::new(rng_state);
    (0..k)
        .map(|_| {
            let detailed = rng.unit() < diversity;
            let template = rng.below(TEMPLATES.len());
            if detailed {
                fill_template(TEMPLATES[template], spec)
            } else {
                DEGENERATE_CAPTION.to_string()
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n: usize,
    pub seed: u64,
    pub diversity: f64,
    pub k: usize,
    pub resolution: usize,
    pub train_fraction: f64,
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config(format!("dataset needs n >= 2, got {}", self.n)));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!("train_fraction must lie in (0, 1), got {}", self.train_fraction)));
        }
        if !(0.0..=1.0).contains(&self.diversity) {
            return Err(Error::Config(format!("diversity must lie in [0, 1], got {}", self.diversity)));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !SUPPORTED_RESOLUTIONS.contains(&self.resolution) {
            return Err(Error::Config(format!("unsupported resolution {}", self.resolution)));
        }
        Ok(())
    }

    pub fn n_train(&self) -> usize {
        (self.n as f64 * self.train_fraction).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: usize,
    pub image: String,
    pub split: Split,
    pub spec: SceneSpec,
    pub captions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub diversity: f64,
    pub dir: PathBuf,
    pub records: Vec<Record>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn image_path(&self, record: &Record) -> PathBuf {
        self.dir.join(&record.image)
    }

    /// Loads the image of `record` as `[3, R, R]` values in `[-1, 1]`.
    pub fn load_image(&self, record: &Record) -> Result<(usize, Vec<f32>)> {
        read_png(&self.image_path(record))
    }
}

pub fn image_name(id: usize) -> String {
    format!("images/img_{id:06}.png")
}

/// Scene specs and caption lists of a dataset, without touching the disk.
pub fn generate_records(cfg: &DatasetConfig) -> Result<Vec<Record>> {
    cfg.validate()?;
    let n_train = cfg.n_train();
    let mut state = cfg.seed;
    let caption_seed = derive_seed(cfg.seed, CAPTION_STREAM);
    Ok((0..cfg.n)
        .map(|id| {
            let (spec, next) = sample_scene(state);
            state = next;
            let captions = caption_scene(&spec, cfg.diversity, derive_seed(caption_seed, id as u64), cfg.k);
            Record {
                id,
                image: image_name(id),
                split: if id < n_train { Split::Train } else { Split::Test },
                spec,
                captions,
            }
        })
        .collect())
}

/// Samples, renders and captions `cfg.n` scenes into `dir`.
pub fn build_dataset(cfg: &DatasetConfig, dir: &Path) -> Result<DatasetManifest> {
    let records = generate_records(cfg)?;
    fs::create_dir_all(dir.join("images")).map_err(io_err(dir))?;
    for r in &records {
        let pixels = render_pixels(&r.spec, cfg.resolution)?;
        write_png(&dir.join(&r.image), &pixels, cfg.resolution)?;
    }
    write_manifest(&dir.join(MANIFEST_FILE), &records)?;
    let meta = serde_json::to_string_pretty(cfg).expect("plain struct serializes");
    fs::write(dir.join("dataset.json"), meta + "\n").map_err(io_err(dir.join("dataset.json")))?;
    Ok(DatasetManifest { seed: cfg.seed, diversity: cfg.diversity, dir: dir.to_path_buf(), records })
}

pub fn write_manifest(path: &Path, records: &[Record]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for r in records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads `manifest.jsonl` (and `dataset.json` when present) from `dir`.
pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let file = File::open(&path).map_err(io_err(&path))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(&path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| Error::Format { what: "manifest", detail: format!("{}:{}: {e}", path.display(), i + 1) })?;
        if rec.id != records.len() {
            return Err(Error::Format {
                what: "manifest",
                detail: format!("ids must be dense from 0; line {} has id {}", i + 1, rec.id),
            });
        }
        records.push(rec);
    }
    let (seed, diversity) = match fs::read_to_string(dir.join("dataset.json")) {
        Ok(text) => {
            let cfg: DatasetConfig = serde_json::from_str(&text)
                .map_err(|e| Error::Format { what: "dataset.json", detail: e.to_string() })?;
            (cfg.seed, cfg.diversity)
        }
        Err(_) => (0, f64::NAN),
    };
    Ok(DatasetManifest { seed, diversity, dir: dir.to_path_buf(), records })
}

pub fn quantize(v: f32) -> u8 {
    ((v as f64 + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn dequantize(b: u8) -> f32 {
    (b as f64 / 127.5 - 1.0) as f32
}

/// Writes planar `[3, R, R]` pixels as an 8-bit RGB PNG.
pub fn write_png(path: &Path, planar: &[f32], resolution: usize) -> Result<()> {
    write_png_rect(path, planar, resolution, resolution)
}

pub fn write_png_rect(path: &Path, planar: &[f32], height: usize, width: usize) -> Result<()> {
    let plane = height * width;
    assert_eq!(planar.len(), 3 * plane, "planar RGB buffer");
    let mut rgb = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for ch in 0..3 {
            rgb.push(quantize(planar[ch * plane + i]));
        }
    }
    let file = File::create(path).map_err(io_err(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::Format { what: "png", detail: format!("{}: {e}", path.display()) };
    let mut w = enc.write_header().map_err(png_err)?;
    w.write_image_data(&rgb).map_err(png_err)?;
    w.finish().map_err(png_err)
}

/// Reads a square 8-bit RGB PNG into planar `[-1, 1]` values.
pub fn read_png(path: &Path) -> Result<(usize, Vec<f32>)> {
    let bad = |detail: String| Error::Format { what: "png", detail: format!("{}: {detail}", path.display()) };
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = png::Decoder::new(BufReader::new(file)).read_info().map_err(|e| bad(e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| bad("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(bad(format!("expected 8-bit RGB, got {:?} {:?}", info.color_type, info.bit_depth)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    if w != h {
        return Err(bad(format!("expected a square image, got {w}x{h}")));
    }
    let plane = w * h;
    let mut out = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        for ch in 0..3 {
            out[ch * plane + i] = dequantize(buf[3 * i + ch]);
        }
    }
    Ok((w, out))
}
