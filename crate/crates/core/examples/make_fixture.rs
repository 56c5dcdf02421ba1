//! Writes the 8-sample fixture dataset used by the CLI tests.
//!
//! `cargo run -p kbridge-core --example make_fixture -- fixtures/coco8`

use std::fs;
use std::path::PathBuf;

use kbridge_core::backends::mock::solid_png;
use serde_json::json;

const LABELS: [&str; 5] = ["person", "dog", "kite", "car", "cat"];

const SAMPLES: [(&str, [u8; 3], &str, [u8; 5]); 8] = [
    ("coco-0001", [200, 40, 40], "Children fly a red kite above a green field", [1, 0, 1, 0, 0]),
    ("coco-0002", [90, 60, 30], "A brown dog chases a ball across the park lawn", [0, 1, 0, 0, 0]),
    ("coco-0003", [30, 30, 160], "A blue car parked beside a brick building", [0, 0, 0, 1, 0]),
    ("coco-0004", [240, 240, 240], "A white cat sleeps on a sunny windowsill", [0, 0, 0, 0, 1]),
    ("coco-0005", [20, 120, 20], "A woman walks her dog along a quiet street", [1, 1, 0, 0, 0]),
    ("coco-0006", [250, 200, 0], "Two kites drift over the beach while people watch", [1, 0, 1, 0, 0]),
    ("coco-0007", [60, 60, 60], "A man washes his car in the driveway", [1, 0, 0, 1, 0]),
    ("coco-0008", [150, 100, 200], "A cat watches a dog through the garden fence", [0, 1, 0, 0, 1]),
];

fn main() {
    let root = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "fixtures/coco8".into()));
    fs::create_dir_all(root.join("images")).unwrap();
    let mut samples = Vec::new();
    let mut gold = format!("sample_id,{}\n", LABELS.join(","));
    for (id, rgb, caption, labels) in SAMPLES {
        let rel = format!("images/{id}.png");
        fs::write(root.join(&rel), solid_png(rgb, &caption.to_lowercase())).unwrap();
        samples.push(json!({"sample_id": id, "image": rel, "text": caption, "labels": labels}));
        let row: Vec<String> = labels.iter().map(u8::to_string).collect();
        gold.push_str(&format!("{id},{}\n", row.join(",")));
    }
    let manifest = json!({
        "dataset_id": "coco8",
        "domain_tag": "general",
        "label_names": LABELS,
        "samples": samples,
    });
    fs::write(root.join("manifest.json"), serde_json::to_string_pretty(&manifest).unwrap() + "\n").unwrap();
    fs::write(root.join("gold.csv"), gold).unwrap();
}
