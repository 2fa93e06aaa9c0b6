//! Regenerates the checked-in fixtures under `fixtures/`: five synthetic
//! 64x64 scenes (a red body with a green head on a sky background), their
//! part masks and object boxes, and the ONNX export of `tiny_net.json`.
//!
//! cargo run -p dff-cli --example make_fixtures -- [fixtures-dir]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use dff_core::adapter::tiny_net::TinyNet;
use dff_core::formats::{save_json, write_mask_png, PartIndex};
use dff_core::BBox;
use image::{Rgb, RgbImage};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIZE: usize = 64;
const SKY: [f32; 3] = [135.0, 190.0, 235.0];
const BODY: [f32; 3] = [200.0, 40.0, 40.0];
const HEAD: [f32; 3] = [50.0, 170.0, 60.0];

/// Body ellipse center and radii, head circle center and radius.
struct Scene {
    body: (f32, f32, f32, f32),
    head: (f32, f32, f32),
}

const SCENES: [Scene; 5] = [
    Scene { body: (30.0, 38.0, 16.0, 10.0), head: (48.0, 24.0, 7.0) },
    Scene { body: (34.0, 42.0, 14.0, 9.0), head: (16.0, 30.0, 6.5) },
    Scene { body: (28.0, 34.0, 18.0, 11.0), head: (46.0, 18.0, 8.0) },
    Scene { body: (36.0, 44.0, 15.0, 8.0), head: (52.0, 32.0, 6.0) },
    Scene { body: (32.0, 36.0, 12.0, 12.0), head: (32.0, 16.0, 7.5) },
];

fn main() {
    let dir: PathBuf = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures"));
    for sub in ["images", "parts"] {
        fs::create_dir_all(dir.join(sub)).unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut index = PartIndex {
        background: vec!["sky".into()],
        ..Default::default()
    };
    let mut boxes: BTreeMap<String, Vec<BBox>> = BTreeMap::new();
    for (i, scene) in SCENES.iter().enumerate() {
        let id = format!("scene{i}");
        let (bx, by, rx, ry) = scene.body;
        let (hx, hy, hr) = scene.head;
        let head = Array2::from_shape_fn((SIZE, SIZE), |(y, x)| {
            let (dx, dy) = (x as f32 + 0.5 - hx, y as f32 + 0.5 - hy);
            dx * dx + dy * dy <= hr * hr
        });
        let body = Array2::from_shape_fn((SIZE, SIZE), |(y, x)| {
            let (dx, dy) = ((x as f32 + 0.5 - bx) / rx, (y as f32 + 0.5 - by) / ry);
            dx * dx + dy * dy <= 1.0 && !head[[y, x]]
        });
        let sky = Array2::from_shape_fn((SIZE, SIZE), |p| !head[p] && !body[p]);
        let mut img = RgbImage::new(SIZE as u32, SIZE as u32);
        for (x, y, px) in img.enumerate_pixels_mut() {
            let p = (y as usize, x as usize);
            let base = if head[p] {
                HEAD
            } else if body[p] {
                BODY
            } else {
                // Vertical gradient.
                let t = y as f32 / SIZE as f32;
                [SKY[0] + 30.0 * t, SKY[1] + 20.0 * t, SKY[2] - 10.0 * t]
            };
            *px = Rgb(base.map(|c| (c + rng.gen_range(-12.0f32..12.0)).round().clamp(0.0, 255.0) as u8));
        }
        img.save(dir.join(format!("images/{id}.png"))).unwrap();
        for (label, mask) in [("body", &body), ("head", &head), ("sky", &sky)] {
            let rel = format!("parts/{id}_{label}.png");
            write_mask_png(mask, &dir.join(&rel)).unwrap();
            index.parts.entry(label.into()).or_default().insert(id.clone(), rel.into());
        }
        boxes.insert(id, vec![object_box(&body, &head)]);
    }
    save_json(&index, &dir.join("parts.json")).unwrap();
    save_json(&boxes, &dir.join("boxes.json")).unwrap();
    let net = TinyNet::from_json(&fs::read_to_string(dir.join("tiny_net.json")).unwrap()).unwrap();
    fs::write(dir.join("tiny_net.onnx"), net.to_onnx_bytes()).unwrap();
    println!("fixtures written to {}", dir.display());
}

fn object_box(body: &Array2<bool>, head: &Array2<bool>) -> BBox {
    let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
    for ((y, x), _) in body.indexed_iter().filter(|(p, &b)| b || head[*p]) {
        let (x, y) = (x as u32, y as u32);
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    BBox::new(x0, y0, x1, y1).unwrap()
}
