use syncd::attention::ForegroundMask;
use syncd::datagen::{DatagenError, FeatureExtractor, ToyExtractor};
use syncd::eval::{geometric_score, intra_cluster_similarity, masked_crop, MID_GRAY};
use syncd::Tensor;

/// 4x4 single-channel image from a row-major list.
fn image(values: [f64; 16]) -> Tensor {
    Tensor::new(vec![4, 4, 1], values.to_vec()).unwrap()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn toy_extractor_matches_cosine_table() {
    // At a 4x4 grid the toy features are the mean-removed pixels themselves.
    let a = [
        1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
    ];
    let mut b = a;
    b[1] = 1.0;
    let mut c = [0.0; 16];
    c[15] = 1.0;
    let centered = |v: [f64; 16]| {
        let m = v.iter().sum::<f64>() / 16.0;
        v.map(|x| x - m)
    };
    let (ca, cb, cc) = (centered(a), centered(b), centered(c));
    let expected = (cosine(&ca, &cb) + cosine(&ca, &cc) + cosine(&cb, &cc)) / 3.0;
    let report = intra_cluster_similarity(
        &[vec![image(a), image(b), image(c)]],
        &ToyExtractor::default(),
    )
    .unwrap();
    assert!((report.mean.unwrap() - expected).abs() < 1e-12);
}

struct Fixed(Vec<(f64, Vec<f64>)>);

impl FeatureExtractor for Fixed {
    fn embed(&self, image: &Tensor) -> Result<Vec<f64>, DatagenError> {
        let key = image.data()[0];
        Ok(self.0.iter().find(|(k, _)| *k == key).unwrap().1.clone())
    }
}

#[test]
fn dataset_mean_and_singletons() {
    let t = |k: f64| Tensor::full(&[1, 1, 1], k);
    let ext = Fixed(vec![
        (0.0, vec![1.0, 0.0]),
        (1.0, vec![0.8, 0.6]),
        (2.0, vec![0.6, 0.8]),
    ]);
    let sets = vec![vec![t(0.0), t(1.0)], vec![t(0.0), t(2.0)], vec![t(1.0)]];
    let report = intra_cluster_similarity(&sets, &ext).unwrap();
    assert_eq!(report.skipped, vec![2]);
    assert!((report.mean.unwrap() - 0.7).abs() < 1e-12);
    let reversed: Vec<Vec<Tensor>> = sets
        .iter()
        .map(|s| s.iter().rev().cloned().collect())
        .collect();
    assert_eq!(
        intra_cluster_similarity(&reversed, &ext).unwrap().per_set,
        report.per_set
    );
}

#[test]
fn l_shaped_crop() {
    let img = Tensor::new(vec![4, 5, 2], (0..40).map(f64::from).collect()).unwrap();
    // L over rows 1..=3, columns 1..=3: vertical bar at column 1, foot on row 3.
    let mut cells = vec![false; 20];
    for r in 1..=3 {
        cells[r * 5 + 1] = true;
    }
    for c in 1..=3 {
        cells[3 * 5 + c] = true;
    }
    let mask = ForegroundMask::new(4, 5, cells.clone()).unwrap();
    let crop = masked_crop(&img, &mask, MID_GRAY).unwrap();
    assert_eq!(crop.shape(), &[3, 3, 2]);
    for r in 0..3 {
        for c in 0..3 {
            let (sr, sc) = (r + 1, c + 1);
            for ch in 0..2 {
                let want = if cells[sr * 5 + sc] {
                    img.get(&[sr, sc, ch])
                } else {
                    MID_GRAY
                };
                assert_eq!(crop.get(&[r, c, ch]), want);
            }
        }
    }
    let cropped_mask = ForegroundMask::new(
        3,
        3,
        (0..9).map(|i| cells[(i / 3 + 1) * 5 + i % 3 + 1]).collect(),
    )
    .unwrap();
    assert_eq!(masked_crop(&crop, &cropped_mask, MID_GRAY).unwrap(), crop);
}

#[test]
fn geometric_properties() {
    let grid: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
    for &a in &grid {
        for &b in &grid {
            let g = geometric_score(a, b).unwrap();
            assert_eq!(g, geometric_score(b, a).unwrap());
            assert!(g <= (a + b) / 2.0 + 1e-15);
            if b < 1.0 {
                assert!(geometric_score(a, b + 0.05).unwrap() >= g);
            }
        }
    }
}
