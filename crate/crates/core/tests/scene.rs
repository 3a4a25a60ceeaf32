use capgan::metrics::distinct_n;
use capgan::persist::config::RunConfig;
use capgan::pipeline::dataset_config;
use capgan::scene::*;
use capgan::text::tokenize;
use proptest::prelude::*;

fn blue_room() -> SceneSpec {
    SceneSpec {
        wall_color: WallColor::Blue,
        bed_color: BedColor::White,
        bed_size: BedSize::Large,
        window_side: WindowSide::Right,
        rug_present: true,
    }
}

fn small_config(n: usize, seed: u64, diversity: f64) -> DatasetConfig {
    DatasetConfig { n, seed, diversity, k: 5, resolution: 16, train_fraction: 2.0 / 3.0 }
}

#[test]
fn wall_colors_are_uniform_over_30k_draws() {
    let mut counts = [0usize; 5];
    let mut state = 12345;
    for _ in 0..30_000 {
        let (spec, next) = sample_scene(state);
        counts[spec.wall_color.index()] += 1;
        state = next;
    }
    for (c, &k) in counts.iter().enumerate() {
        let f = k as f64 / 30_000.0;
        assert!((f - 0.2).abs() <= 0.02, "wall colour {c}: frequency {f}");
    }
}

#[test]
fn blue_wall_pixel_matches_color_table() {
    let px = render_pixels(&blue_room(), 64).unwrap();
    let plane = 64 * 64;
    let blue = [0.15f32, 0.3, 0.85];
    for ch in 0..3 {
        let v = px[ch * plane + 5 * 64 + 5];
        assert!((v - (2.0 * blue[ch] - 1.0)).abs() < 1e-6, "channel {ch}: {v}");
    }
}

#[test]
fn floor_and_bed_follow_layout() {
    let r = 64;
    let px = render_pixels(&blue_room(), r).unwrap();
    let at = |row: usize, col: usize| [0, 1, 2].map(|ch| px[(ch * r + row) * r + col]);
    // bottom row is floor gray
    assert_eq!(at(63, 32), [0.0, 0.0, 0.0]);
    // centre of the bed band is white bed
    let white = 2.0 * 0.95f32 - 1.0;
    assert!(at(49, 32).iter().all(|v| (v - white).abs() < 1e-6));
    // large beds reach 30% of the width, small ones do not
    let small = SceneSpec { bed_size: BedSize::Small, ..blue_room() };
    let spx = render_pixels(&small, r).unwrap();
    assert_eq!(spx[49 * r + 19], 0.0);
}

#[test]
fn downsampled_render_matches_lower_resolution_away_from_borders() {
    for spec in SceneSpec::all().into_iter().step_by(7) {
        let hi = render_pixels(&spec, 64).unwrap();
        let lo = render_pixels(&spec, 32).unwrap();
        let mut borders = 0;
        for ch in 0..3 {
            for row in 0..32 {
                for col in 0..32 {
                    let q = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .map(|(dy, dx)| hi[(ch * 64 + 2 * row + dy) * 64 + 2 * col + dx]);
                    if q.iter().any(|&v| v != q[0]) {
                        borders += 1;
                        continue;
                    }
                    let avg = q.iter().sum::<f32>() / 4.0;
                    assert!((avg - lo[(ch * 32 + row) * 32 + col]).abs() <= 0.1, "{spec:?} at {row},{col}");
                }
            }
        }
        assert!(borders < 3 * 32 * 32 / 5, "{borders} border pixels");
    }
}

#[test]
fn rendering_is_deterministic_and_in_range() {
    let a = render_pixels(&blue_room(), 32).unwrap();
    let b = render_pixels(&blue_room(), 32).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn png_round_trip_is_exact_after_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.png");
    let px: Vec<f32> = (0..3 * 16 * 16).map(|i| ((i * 37 % 255) as f32 / 127.0) - 1.0).collect();
    write_png(&path, &px, 16).unwrap();
    let (r, back) = read_png(&path).unwrap();
    assert_eq!(r, 16);
    let quantized: Vec<f32> = px.iter().map(|&v| dequantize(quantize(v))).collect();
    assert_eq!(back, quantized);
}

#[test]
fn manifest_is_byte_identical_across_builds() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = small_config(30, 9, 0.5);
    build_dataset(&cfg, a.path()).unwrap();
    build_dataset(&cfg, b.path()).unwrap();
    let read = |d: &std::path::Path| std::fs::read(d.join(MANIFEST_FILE)).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    let img = image_name(7);
    assert_eq!(std::fs::read(a.path().join(&img)).unwrap(), std::fs::read(b.path().join(&img)).unwrap());
}

#[test]
fn manifest_lines_have_exact_fields() {
    let dir = tempfile::tempdir().unwrap();
    build_dataset(&small_config(3, 1, 1.0), dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    let mut keys: Vec<&str> = first.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort();
    assert_eq!(keys, ["captions", "id", "image", "spec", "split"]);
    assert_eq!(first["image"], "images/img_000000.png");
    assert_eq!(first["split"], "train");
    assert_eq!(first["spec"].as_object().unwrap().len(), 5);
}

#[test]
fn two_scene_dataset_keeps_both_records() {
    let dir = tempfile::tempdir().unwrap();
    let m = build_dataset(&small_config(2, 3, 1.0), dir.path()).unwrap();
    let ids: Vec<usize> = m.records.iter().map(|r| r.id).collect();
    assert_eq!(ids, [0, 1]);
    let back = load_manifest(dir.path()).unwrap();
    assert_eq!(back.records, m.records);
    assert_eq!(back.seed, 3);
}

#[test]
fn default_split_is_two_to_one() {
    let cfg = RunConfig::default();
    let dc = dataset_config(&cfg, 3000, 1.0, 1);
    let recs = generate_records(&dc).unwrap();
    let train = recs.iter().filter(|r| r.split == Split::Train).count();
    assert_eq!((train, recs.len() - train), (2000, 1000));
}

#[test]
fn oracle_captions_are_diverse_and_degenerate_ones_are_not() {
    let corpus = |d: f64| -> Vec<Vec<String>> {
        generate_records(&small_config(500, 4, d))
            .unwrap()
            .into_iter()
            .flat_map(|r| r.captions)
            .map(|c| tokenize(&c))
            .collect()
    };
    let (hi, lo) = (distinct_n(&corpus(1.0), 2), distinct_n(&corpus(0.0), 2));
    assert!(hi >= 3.0 * lo, "distinct-2 {hi} vs {lo}");
}

#[test]
fn detailed_caption_names_the_scene() {
    let caps = caption_scene(&blue_room(), 1.0, 77, 40);
    assert!(caps.iter().any(|c| c.contains("blue walls") && c.contains("large white bed")));
    let templates: std::collections::HashSet<&str> =
        TEMPLATES.iter().copied().filter(|t| caps.contains(&fill_template(t, &blue_room()))).collect();
    assert!(templates.len() >= 8);
    assert_eq!(caption_scene(&blue_room(), 0.0, 77, 5), vec![DEGENERATE_CAPTION; 5]);
}

#[test]
fn every_template_caption_fits_the_length_cap() {
    for spec in SceneSpec::all() {
        for t in TEMPLATES {
            assert!(tokenize(&fill_template(t, &spec)).len() <= 16, "{t}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn default_split_is_exact_for_multiples_of_three(k in 1usize..40_000) {
        let dc = dataset_config(&RunConfig::default(), 3 * k, 1.0, 1);
        prop_assert_eq!(dc.n_train(), 2 * k);
    }

    #[test]
    fn records_are_dense_and_sized(n in 2usize..60, seed in any::<u64>(), d in 0.0f64..=1.0) {
        let recs = generate_records(&small_config(n, seed, d)).unwrap();
        prop_assert_eq!(recs.len(), n);
        for (i, r) in recs.iter().enumerate() {
            prop_assert_eq!(r.id, i);
            prop_assert_eq!(r.captions.len(), 5);
        }
    }
}
