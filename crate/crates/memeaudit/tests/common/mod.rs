#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use memeaudit::config::RunConfig;
use memeaudit::core::corpus::Polarity;
use memeaudit::core::RasterImage;
use memeaudit::imageio::encode_png;
use memeaudit::mock::{MockRule, MockScript};

pub const POSITIVE: &str = "hateful";
pub const NEGATIVE: &str = "not-hateful";

/// A 160x160 image of four coloured quadrants with a seed-dependent square.
pub fn meme_image(seed: usize) -> RasterImage {
    let palette = [
        [200, 40, 40],
        [40, 160, 60],
        [30, 60, 200],
        [230, 200, 50],
        [120, 40, 160],
    ];
    RasterImage::from_fn(160, 160, |x, y| {
        let off = 20 + (seed * 7) % 60;
        if (off..off + 40).contains(&x) && (off..off + 40).contains(&y) {
            return [250, 250, 250];
        }
        let q = (x / 80) + 2 * (y / 80);
        palette[(q + seed) % palette.len()]
    })
    .unwrap()
}

pub fn gold_of(i: usize) -> Polarity {
    if i < 20 {
        Polarity::Positive
    } else {
        Polarity::Negative
    }
}

pub fn ocr_of(i: usize) -> String {
    let topic = match i {
        0..=2 => "they pray at the mosque every friday",
        3..=5 => "send them back across the border",
        20..=22 => "my cat judges my cooking again",
        23..=26 => "when the dishwasher is a woman",
        27..=29 => "kitchen sandwich make me one",
        _ => "just another monday at the office",
    };
    format!("{topic} number {i}")
}

/// Writes `n` memes and their manifest under `dir`; returns the manifest path.
pub fn write_dataset(dir: &Path, n: usize) -> PathBuf {
    fs::create_dir_all(dir.join("img")).unwrap();
    let mut lines = String::new();
    for i in 0..n {
        let name = format!("img/s{i:02}.png");
        fs::write(dir.join(&name), encode_png(&meme_image(i)).unwrap().bytes).unwrap();
        let label = if gold_of(i) == Polarity::Positive {
            POSITIVE
        } else {
            NEGATIVE
        };
        lines.push_str(
            &serde_json::json!({"id": format!("s{i:02}"), "image": name, "ocr": ocr_of(i), "label": label}).to_string(),
        );
        lines.push('\n');
    }
    let path = dir.join("fhm.jsonl");
    fs::write(&path, lines).unwrap();
    path
}

/// s00-s02 wrongly negative, flipped by occ1 (case 3); s03-s05 wrongly negative
/// throughout (case 4); s20-s22 wrongly positive, flipped by occ0 (case 1);
/// s23-s29 wrongly positive throughout (case 2); s30 unparseable; the rest correct.
pub fn scenario_script() -> MockScript {
    let mut script = MockScript::new("not-hateful - harmless joke");
    script.embedding_seed = 7;
    for s in ["s00", "s01", "s02"] {
        script = script.rule(
            MockRule::reply("hateful - the covered caption changes it")
                .for_sample(s)
                .for_occlusion("occ1"),
        );
    }
    for s in ["s20", "s21", "s22"] {
        script = script.rule(MockRule::reply("not-hateful").for_sample(s).for_occlusion("occ0"));
    }
    script = script.rule(MockRule::reply("I am unable to judge this image.").for_sample("s30"));
    for s in ["s00", "s01", "s02", "s03", "s04", "s05"] {
        script = script.rule(MockRule::reply("not-hateful - just a picture").for_sample(s));
    }
    script = script.rule(MockRule::reply("hateful - mocks a group").for_sample("s2*"));
    script = script.rule(MockRule::reply("hateful - attacks a group").for_sample("s0*"));
    script = script.rule(MockRule::reply("hateful - attacks a group").for_sample("s1*"));
    script
}

pub fn config_text(manifest: &Path, base_url: &str, prompts: &[&str]) -> String {
    format!(
        r#"
prompts = {prompts:?}

[[datasets]]
id = "fhm"
manifest = "{manifest}"

[[endpoints]]
id = "mock-vlm"
base_url = "{base_url}"
model_name = "mock-model"
max_inflight = 4
requests_per_minute = 100000

[endpoints.retry]
max_attempts = 3
initial_backoff_ms = 1
max_backoff_ms = 5
timeout_ms = 10000

[typology]
enabled = true

[typology.embedder]
id = "mock-embed"
base_url = "{base_url}"
model_name = "mock-embedder"
max_inflight = 4
requests_per_minute = 100000
"#,
        manifest = manifest.display(),
    )
}

/// Writes `config.toml` into `dir` and loads it with outputs under `dir`.
pub fn write_config(dir: &Path, manifest: &Path, base_url: &str, prompts: &[&str]) -> (PathBuf, RunConfig) {
    fs::create_dir_all(dir).unwrap();
    let path = dir.join("config.toml");
    fs::write(&path, config_text(manifest, base_url, prompts)).unwrap();
    let cfg = RunConfig::load(&path).unwrap();
    (path, cfg)
}

/// Every file under `dir`, relative path to bytes.
pub fn snapshot(dir: &Path) -> std::collections::BTreeMap<PathBuf, Vec<u8>> {
    let mut out = std::collections::BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}
