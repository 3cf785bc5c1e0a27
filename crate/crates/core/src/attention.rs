//! Masked shared attention across a set of jointly generated images.
//!
//! Every image contributes a token block `[text_i | image_i]`. Queries of
//! image `i` attend over the concatenation of all `N` blocks, with an additive
//! bias matrix deciding which cross-image pairs are visible: an image's own
//! tokens are always visible, other images only expose their foreground
//! image tokens, and text tokens never look outside their own image.

use std::io::Write;
use std::path::Path;

use crate::tensor::{softmax_in_place, Result, Tensor, TensorError, BLOCKED};

/// Base frequency of the rotary embedding.
pub const ROPE_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenLayout {
    pub num_images: usize,
    pub text_len: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Text { index: usize },
    Image { row: usize, col: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenInfo {
    pub image: usize,
    pub kind: TokenKind,
}

impl TokenLayout {
    pub fn new(num_images: usize, text_len: usize, height: usize, width: usize) -> Result<Self> {
        if num_images == 0 || height == 0 || width == 0 {
            return Err(TensorError::InvalidShape {
                shape: vec![num_images, text_len, height, width],
                reason: "layout needs at least one image and a non-empty grid".into(),
            });
        }
        Ok(Self {
            num_images,
            text_len,
            height,
            width,
        })
    }

    pub fn image_tokens(&self) -> usize {
        self.height * self.width
    }

    /// Tokens per image, `n`.
    pub fn per_image(&self) -> usize {
        self.text_len + self.image_tokens()
    }

    /// Length of the concatenated sequence, `N * n`.
    pub fn total(&self) -> usize {
        self.num_images * self.per_image()
    }

    /// Image and class of a global token index.
    pub fn token(&self, index: usize) -> TokenInfo {
        assert!(index < self.total(), "token index {index} out of range");
        let n = self.per_image();
        let image = index / n;
        let local = index % n;
        let kind = if local < self.text_len {
            TokenKind::Text { index: local }
        } else {
            let p = local - self.text_len;
            TokenKind::Image {
                row: p / self.width,
                col: p % self.width,
            }
        };
        TokenInfo { image, kind }
    }
}

/// Object pixels of one image on the token grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForegroundMask {
    height: usize,
    width: usize,
    cells: Vec<bool>,
}

impl ForegroundMask {
    pub fn new(height: usize, width: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != height * width {
            return Err(TensorError::InvalidShape {
                shape: vec![height, width],
                reason: format!("mask has {} cells", cells.len()),
            });
        }
        Ok(Self {
            height,
            width,
            cells,
        })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            cells: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// 1.0 for object, 0.0 for background, as an `h x w` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.height, self.width],
            self.cells
                .iter()
                .map(|&c| if c { 1.0 } else { 0.0 })
                .collect(),
        )
        .expect("mask dimensions are positive")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            &[h, w] => Self::new(h, w, t.data().iter().map(|&x| x > 0.5).collect()),
            other => Err(TensorError::InvalidShape {
                shape: other.to_vec(),
                reason: "mask tensor must be 2-D".into(),
            }),
        }
    }
}

/// The `n x (N n)` additive bias of one query image.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasMatrix {
    pub values: Tensor,
}

impl BiasMatrix {
    pub fn is_blocked(&self, query: usize, key: usize) -> bool {
        self.values.get(&[query, key]) == BLOCKED
    }
}

/// Bias matrices `M_1..M_N` for a set generated jointly.
///
/// With `first_step` set, image tokens see every image token of the other
/// images; text isolation is kept regardless.
pub fn build_msa_mask(
    layout: &TokenLayout,
    fg: &[ForegroundMask],
    first_step: bool,
) -> Result<Vec<BiasMatrix>> {
    if fg.len() != layout.num_images
        || fg
            .iter()
            .any(|m| m.height != layout.height || m.width != layout.width)
    {
        return Err(TensorError::Shape {
            op: "build_msa_mask",
            left: vec![layout.num_images, layout.height, layout.width],
            right: fg
                .first()
                .map_or(vec![fg.len()], |m| vec![fg.len(), m.height, m.width]),
        });
    }
    let n = layout.per_image();
    let total = layout.total();
    let mut out = Vec::with_capacity(layout.num_images);
    for i in 0..layout.num_images {
        let mut values = Tensor::zeros(&[n, total]);
        for q in 0..n {
            let query_is_text = q < layout.text_len;
            let row = values.row_mut(q);
            for (key, slot) in row.iter_mut().enumerate() {
                let info = layout.token(key);
                if info.image == i {
                    continue;
                }
                let visible = match (query_is_text, info.kind) {
                    (true, _) => false,
                    (false, TokenKind::Text { .. }) => false,
                    (false, TokenKind::Image { row, col }) => {
                        first_step || fg[info.image].get(row, col)
                    }
                };
                if !visible {
                    *slot = BLOCKED;
                }
            }
        }
        out.push(BiasMatrix { values });
    }
    Ok(out)
}

/// Queries, keys and values of every image, each `n x (heads * head_dim)`.
#[derive(Debug, Clone)]
pub struct AttentionBatch {
    pub q: Vec<Tensor>,
    pub k: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttentionBatch {
    fn validate(&self) -> Result<usize> {
        if self.head_dim == 0 || self.heads == 0 {
            return Err(TensorError::InvalidShape {
                shape: vec![self.heads, self.head_dim],
                reason: "head count and head width must be positive".into(),
            });
        }
        let n_img = self.q.len();
        if n_img == 0 || self.k.len() != n_img || self.v.len() != n_img {
            return Err(TensorError::InvalidShape {
                shape: vec![self.q.len(), self.k.len(), self.v.len()],
                reason: "q, k and v need one entry per image".into(),
            });
        }
        let n = self.q[0].shape()[0];
        let width = self.heads * self.head_dim;
        for t in self.q.iter().chain(&self.k).chain(&self.v) {
            if t.shape() != [n, width] {
                return Err(TensorError::Shape {
                    op: "msa_forward",
                    left: vec![n, width],
                    right: t.shape().to_vec(),
                });
            }
        }
        Ok(n)
    }
}

/// Rotary position of each token; `None` leaves the token unrotated.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionGrid {
    pub positions: Vec<Option<[f64; 2]>>,
}

impl PositionGrid {
    /// Positions of the tokens of image `i` within the concatenated sequence.
    pub fn image_slice(&self, layout: &TokenLayout, i: usize) -> &[Option<[f64; 2]>] {
        let n = layout.per_image();
        &self.positions[i * n..(i + 1) * n]
    }
}

/// Stacked rotary grid: image `i`'s token `(r, c)` sits at `(i H + r, c)`.
/// Text tokens stay unrotated.
pub fn rope_grid(layout: &TokenLayout) -> PositionGrid {
    let positions = (0..layout.total())
        .map(|idx| match layout.token(idx) {
            TokenInfo {
                image,
                kind: TokenKind::Image { row, col },
            } => Some([(image * layout.height + row) as f64, col as f64]),
            _ => None,
        })
        .collect();
    PositionGrid { positions }
}

/// Angular frequencies of the axial rotary embedding for one head.
///
/// Pairs `(2j, 2j+1)`; the first `ceil(p/2)` pairs rotate with the row
/// coordinate and the rest with the column coordinate.
pub fn rotary_frequencies(head_dim: usize) -> Vec<(usize, f64)> {
    let pairs = head_dim / 2;
    let row_pairs = pairs.div_ceil(2);
    let col_pairs = pairs - row_pairs;
    let mut out = Vec::with_capacity(pairs);
    for j in 0..row_pairs {
        out.push((0, ROPE_BASE.powf(-(j as f64) / row_pairs as f64)));
    }
    for j in 0..col_pairs {
        out.push((1, ROPE_BASE.powf(-(j as f64) / col_pairs as f64)));
    }
    out
}

/// Rotates every head of `x` (`tokens x heads*head_dim`) in place.
///
/// `inverse` applies the transposed rotation, which is the adjoint used when
/// back-propagating through the embedding.
pub fn apply_rotary(
    x: &mut Tensor,
    positions: &[Option<[f64; 2]>],
    heads: usize,
    head_dim: usize,
    inverse: bool,
) -> Result<()> {
    if x.shape() != [positions.len(), heads * head_dim] {
        return Err(TensorError::Shape {
            op: "apply_rotary",
            left: x.shape().to_vec(),
            right: vec![positions.len(), heads * head_dim],
        });
    }
    let freqs = rotary_frequencies(head_dim);
    let sign = if inverse { -1.0 } else { 1.0 };
    for (row, pos) in x.rows_mut().zip(positions) {
        let Some(pos) = pos else { continue };
        let rot: Vec<(f64, f64)> = freqs
            .iter()
            .map(|&(axis, w)| {
                let angle = sign * pos[axis] * w;
                (angle.cos(), angle.sin())
            })
            .collect();
        for h in 0..heads {
            let head = &mut row[h * head_dim..(h + 1) * head_dim];
            for (j, &(c, s)) in rot.iter().enumerate() {
                let (a, b) = (head[2 * j], head[2 * j + 1]);
                head[2 * j] = a * c - b * s;
                head[2 * j + 1] = a * s + b * c;
            }
        }
    }
    Ok(())
}

/// Multi-head attention of `q` over `k`/`v` with an additive bias.
///
/// Returns the output and, per head, the `nq x nk` attention weights.
pub fn attend(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    bias: &Tensor,
    heads: usize,
    head_dim: usize,
) -> Result<(Tensor, Vec<Tensor>)> {
    let width = heads * head_dim;
    let nq = q.shape()[0];
    let nk = k.shape()[0];
    if q.shape() != [nq, width] || k.shape() != [nk, width] || v.shape() != [nk, width] {
        return Err(TensorError::Shape {
            op: "attend",
            left: q.shape().to_vec(),
            right: k.shape().to_vec(),
        });
    }
    if bias.shape() != [nq, nk] {
        return Err(TensorError::Shape {
            op: "attend bias",
            left: vec![nq, nk],
            right: bias.shape().to_vec(),
        });
    }
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut out = Tensor::zeros(&[nq, width]);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = head_columns(q, h, head_dim);
        let kh_t = head_columns(k, h, head_dim).transpose()?;
        let mut p = qh.matmul(&kh_t)?;
        for (prow, brow) in p.rows_mut().zip(bias.rows()) {
            for (s, b) in prow.iter_mut().zip(brow) {
                *s = *s * scale + b;
            }
            softmax_in_place(prow);
        }
        // (P V)^T = V^T P^T keeps the long dimension innermost.
        let vh_t = head_columns(v, h, head_dim).transpose()?;
        let oh_t = vh_t.matmul(&p.transpose()?)?;
        for d in 0..head_dim {
            for (i, &x) in oh_t.row(d).iter().enumerate() {
                out.row_mut(i)[h * head_dim + d] = x;
            }
        }
        probs.push(p);
    }
    Ok((out, probs))
}

/// Columns of head `h` as a contiguous `n x head_dim` matrix.
pub(crate) fn head_columns(x: &Tensor, h: usize, head_dim: usize) -> Tensor {
    let n = x.shape()[0];
    let mut data = Vec::with_capacity(n * head_dim);
    for row in x.rows() {
        data.extend_from_slice(&row[h * head_dim..(h + 1) * head_dim]);
    }
    Tensor::new(vec![n, head_dim], data).expect("rows times head width")
}

fn check_consistency(
    batch: &AttentionBatch,
    masks: &[BiasMatrix],
    positions: Option<&PositionGrid>,
) -> Result<usize> {
    let n = batch.validate()?;
    let total = n * batch.q.len();
    if masks.len() != batch.q.len() || masks.iter().any(|m| m.values.shape() != [n, total]) {
        return Err(TensorError::Shape {
            op: "msa_forward masks",
            left: vec![batch.q.len(), n, total],
            right: masks
                .first()
                .map_or(vec![masks.len()], |m| m.values.shape().to_vec()),
        });
    }
    if let Some(p) = positions {
        if p.positions.len() != total {
            return Err(TensorError::Shape {
                op: "msa_forward positions",
                left: vec![total],
                right: vec![p.positions.len()],
            });
        }
    }
    Ok(n)
}

/// Masked shared attention: for each image `i`,
/// `softmax(q_i [k_1..k_N]^T / sqrt(d') + M_i) [v_1..v_N]`, with the rotary
/// embedding applied to queries and keys when `positions` is given.
pub fn msa_forward(
    batch: &AttentionBatch,
    masks: &[BiasMatrix],
    positions: Option<&PositionGrid>,
) -> Result<Vec<Tensor>> {
    let n = check_consistency(batch, masks, positions)?;
    let keys: Vec<&Tensor> = batch.k.iter().collect();
    let mut all_k = Tensor::concat_rows(&keys)?;
    let values: Vec<&Tensor> = batch.v.iter().collect();
    let all_v = Tensor::concat_rows(&values)?;
    if let Some(p) = positions {
        apply_rotary(&mut all_k, &p.positions, batch.heads, batch.head_dim, false)?;
    }
    batch
        .q
        .iter()
        .zip(masks)
        .enumerate()
        .map(|(i, (q, mask))| {
            let mut q = q.clone();
            if let Some(p) = positions {
                apply_rotary(
                    &mut q,
                    &p.positions[i * n..(i + 1) * n],
                    batch.heads,
                    batch.head_dim,
                    false,
                )?;
            }
            attend(
                &q,
                &all_k,
                &all_v,
                &mask.values,
                batch.heads,
                batch.head_dim,
            )
            .map(|(o, _)| o)
        })
        .collect()
}

/// Explicit-loop reference for [`msa_forward`], used by tests and `selftest`.
pub fn attention_oracle(
    batch: &AttentionBatch,
    masks: &[BiasMatrix],
    positions: Option<&PositionGrid>,
) -> Result<Vec<Tensor>> {
    let n = check_consistency(batch, masks, positions)?;
    let n_img = batch.q.len();
    let (heads, hd) = (batch.heads, batch.head_dim);

    // Rotation of a single head vector, written out pair by pair.
    let rotate = |vec: &[f64], pos: Option<[f64; 2]>| -> Vec<f64> {
        let mut out = vec.to_vec();
        let Some(pos) = pos else { return out };
        let pairs = hd / 2;
        let row_pairs = pairs.div_ceil(2);
        for j in 0..pairs {
            let (coord, idx, count) = if j < row_pairs {
                (pos[0], j, row_pairs)
            } else {
                (pos[1], j - row_pairs, pairs - row_pairs)
            };
            let theta = coord / ROPE_BASE.powf(idx as f64 / count as f64);
            let (a, b) = (vec[2 * j], vec[2 * j + 1]);
            out[2 * j] = a * theta.cos() - b * theta.sin();
            out[2 * j + 1] = a * theta.sin() + b * theta.cos();
        }
        out
    };
    let pos_of = |img: usize, tok: usize| positions.and_then(|p| p.positions[img * n + tok]);

    let mut outputs = Vec::with_capacity(n_img);
    for i in 0..n_img {
        let mut out = Tensor::zeros(&[n, heads * hd]);
        for qt in 0..n {
            for h in 0..heads {
                let qv = rotate(&batch.q[i].row(qt)[h * hd..(h + 1) * hd], pos_of(i, qt));
                let mut logits = Vec::with_capacity(n * n_img);
                for j in 0..n_img {
                    for kt in 0..n {
                        let kv = rotate(&batch.k[j].row(kt)[h * hd..(h + 1) * hd], pos_of(j, kt));
                        let mut dot = 0.0;
                        for d in 0..hd {
                            dot += qv[d] * kv[d];
                        }
                        logits.push(
                            dot / (hd as f64).sqrt() + masks[i].values.get(&[qt, j * n + kt]),
                        );
                    }
                }
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if max <= BLOCKED / 2.0 {
                    continue;
                }
                let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let total: f64 = weights.iter().sum();
                for d in 0..hd {
                    let mut acc = 0.0;
                    for j in 0..n_img {
                        for kt in 0..n {
                            acc += weights[j * n + kt] / total * batch.v[j].get(&[kt, h * hd + d]);
                        }
                    }
                    out.set(&[qt, h * hd + d], acc);
                }
            }
        }
        outputs.push(out);
    }
    Ok(outputs)
}

/// Writes a bias matrix as a binary PGM: white = visible, black = blocked.
pub fn write_bias_pgm(bias: &BiasMatrix, path: impl AsRef<Path>) -> std::io::Result<()> {
    let (rows, cols) = (bias.values.shape()[0], bias.values.shape()[1]);
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(file, "P5\n{cols} {rows}\n255\n")?;
    let pixels: Vec<u8> = bias
        .values
        .data()
        .iter()
        .map(|&b| if b == BLOCKED { 0 } else { 255 })
        .collect();
    file.write_all(&pixels)?;
    file.flush()
}
