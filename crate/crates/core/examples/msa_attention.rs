//! Masked shared attention over three jointly generated images.
//!
//! Builds foreground masks, runs the vectorized attention and the explicit
//! loop oracle, and writes the bias matrices as PGM images.
//!
//! Run with `cargo run --example msa_attention [OUT_DIR]`.

use syncd::attention::{
    attention_oracle, build_msa_mask, msa_forward, rope_grid, write_bias_pgm, AttentionBatch,
    ForegroundMask, TokenLayout,
};
use syncd::{Rng, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out_dir = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("syncd-msa"));
    std::fs::create_dir_all(&out_dir)?;

    let (images, text_len, h, w) = (3, 2, 4, 4);
    let layout = TokenLayout::new(images, text_len, h, w)?;
    let n = layout.per_image();
    let (heads, head_dim) = (2, 4);

    // A centered square of object pixels in each image, shifted per view.
    let fg: Vec<ForegroundMask> = (0..images)
        .map(|i| {
            let cells = (0..h * w)
                .map(|p| {
                    let (r, c) = (p / w, p % w);
                    (1..3).contains(&r) && (i.min(1)..i.min(1) + 2).contains(&c)
                })
                .collect();
            ForegroundMask::new(h, w, cells)
        })
        .collect::<Result<_, _>>()?;

    let mut rng = Rng::new(7);
    let mut draw = || -> Vec<Tensor> {
        (0..images)
            .map(|_| Tensor::randn(&[n, heads * head_dim], &mut rng))
            .collect()
    };
    let batch = AttentionBatch {
        q: draw(),
        k: draw(),
        v: draw(),
        heads,
        head_dim,
    };

    let grid = rope_grid(&layout);
    for first_step in [true, false] {
        let masks = build_msa_mask(&layout, &fg, first_step)?;
        let fast = msa_forward(&batch, &masks, Some(&grid))?;
        let slow = attention_oracle(&batch, &masks, Some(&grid))?;
        let worst = fast
            .iter()
            .zip(&slow)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max);
        let blocked = masks
            .iter()
            .map(|m| m.values.data().iter().filter(|&&b| b != 0.0).count())
            .sum::<usize>();
        println!(
            "first_step={first_step:5}: {blocked} blocked entries, max |fast - oracle| = {worst:.2e}"
        );
        if !first_step {
            for (i, m) in masks.iter().enumerate() {
                let path = out_dir.join(format!("bias_{i}.pgm"));
                write_bias_pgm(m, &path)?;
                println!("  wrote {}", path.display());
            }
        }
    }
    Ok(())
}
