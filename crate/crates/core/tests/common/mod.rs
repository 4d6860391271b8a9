#![allow(dead_code)]

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use toolrl_core::imagekit::ImageBuffer;
use toolrl_core::mat::{write_jsonl, SourceItem};

/// Writes `n` textured source images plus `sources.jsonl` into `dir`.
pub fn write_sources(dir: &Path, n: usize, width: u32, height: u32) -> Vec<SourceItem> {
    let img_dir = dir.join("src");
    std::fs::create_dir_all(&img_dir).unwrap();
    let items: Vec<SourceItem> = (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
            let base: [u8; 3] = [rng.random_range(40..200), rng.random_range(40..200), rng.random_range(40..200)];
            let img = ImageBuffer::from_fn(width, height, |x, y| {
                let t = ((x * 7 + y * 13 + i as u32) % 32) as u8;
                [base[0].wrapping_add(t), base[1].wrapping_sub(t), base[2] ^ (x as u8)]
            })
            .unwrap();
            let rel = format!("src/s{i:04}.png");
            img.save_png(&dir.join(&rel)).unwrap();
            SourceItem {
                id: format!("item_{i:04}"),
                image_path: rel,
                question: format!("What is shown in picture {i}?"),
                gold_answers: vec![format!("thing {i}")],
            }
        })
        .collect();
    write_jsonl(&dir.join("sources.jsonl"), &items).unwrap();
    items
}

/// Every regular file under `dir`, as (relative path, bytes), sorted.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
