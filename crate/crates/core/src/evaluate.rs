//! Test-time machinery: the 8-variant self-ensemble, memory-bounded tiled
//! inference, and per-dataset metric reports.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::augment::{apply_geometric, invert_geometric, GeometricTransform};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::image_io::read_image;
use crate::manifest::DatasetManifest;
use crate::metrics::{psnr, psnr_y, ssim};
use crate::models::receptive_field;
use crate::ops::{crop, pad_reflect};
use crate::tensor::Tensor;

/// Runs the model over the 8 flip/rotation variants of the input, undoes
/// each transform on the corresponding output, and averages.
pub fn self_ensemble<F>(model: F, image: &Tensor<f32>) -> Result<Tensor<f32>>
where
    F: Fn(&Tensor<f32>) -> Result<Tensor<f32>>,
{
    let mut acc: Option<Tensor<f32>> = None;
    for t in GeometricTransform::all() {
        let out = model(&apply_geometric(t, image))?;
        let aligned = invert_geometric(t, &out);
        match &mut acc {
            None => acc = Some(aligned),
            Some(a) => {
                a.same_shape(&aligned)?;
                for (x, y) in a.data.iter_mut().zip(&aligned.data) {
                    *x += *y;
                }
            }
        }
    }
    let mut out = acc.expect("eight variants");
    for v in &mut out.data {
        *v /= 8.0;
    }
    Ok(out)
}

/// Tile size and overlap, both in pixels and divisible by 4. Overlap must
/// cover the model's receptive-field radius so stitched tiles agree with a
/// whole-image forward pass.
#[derive(Clone, Copy, Debug)]
pub struct TileConfig {
    pub tile: usize,
    pub overlap: usize,
}

/// Minimal compliant overlap for a model: the receptive-field radius
/// rounded up to a multiple of 4.
pub fn min_overlap(graph: &Graph<f32>) -> usize {
    let radius = receptive_field(graph) / 2;
    radius.div_ceil(4) * 4
}

pub fn tiled_infer(
    graph: &Graph<f32>,
    image: &Tensor<f32>,
    cfg: TileConfig,
) -> Result<Tensor<f32>> {
    if cfg.tile == 0 || !cfg.tile.is_multiple_of(4) {
        return Err(Error::InvalidTileConfig(format!(
            "tile size {} not divisible by 4",
            cfg.tile
        )));
    }
    if !cfg.overlap.is_multiple_of(4) {
        return Err(Error::InvalidTileConfig(format!(
            "overlap {} not divisible by 4",
            cfg.overlap
        )));
    }
    let needed = min_overlap(graph);
    if cfg.overlap < needed {
        return Err(Error::InvalidTileConfig(format!(
            "overlap {} below receptive-field radius (need >= {})",
            cfg.overlap, needed
        )));
    }
    let (h, w) = (image.shape.h, image.shape.w);
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::InvalidTileConfig(format!(
            "tiled inference needs spatial size divisible by 4, got {h}x{w} (pad first)"
        )));
    }
    // Each core cell gets a window with up to `overlap` margin, clamped to
    // the image bounds. A clamped window edge coincides with the image edge,
    // so the layer-wise zero padding there matches the whole-image pass and
    // every output pixel agrees with the direct forward.
    let mut out = Tensor::zeros(image.shape);
    let mut cy = 0;
    while cy < h {
        let core_h = cfg.tile.min(h - cy);
        let wy0 = cy.saturating_sub(cfg.overlap);
        let wy1 = (cy + core_h + cfg.overlap).min(h);
        let mut cx = 0;
        while cx < w {
            let core_w = cfg.tile.min(w - cx);
            let wx0 = cx.saturating_sub(cfg.overlap);
            let wx1 = (cx + core_w + cfg.overlap).min(w);
            let win = crop(image, wy0, wx0, wy1 - wy0, wx1 - wx0);
            let sr = graph.forward(&win)?;
            for c in 0..out.shape.c {
                for y in 0..core_h {
                    for x in 0..core_w {
                        *out.at_mut(0, c, cy + y, cx + x) = sr.at(0, c, cy - wy0 + y, cx - wx0 + x);
                    }
                }
            }
            cx += cfg.tile;
        }
        cy += cfg.tile;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug)]
pub struct InferOptions {
    pub ensemble: bool,
    pub tile: Option<TileConfig>,
}

impl Default for InferOptions {
    fn default() -> Self {
        InferOptions {
            ensemble: true,
            tile: None,
        }
    }
}

/// Full inference pipeline: reflective padding to a multiple of 4, optional
/// tiling and self-ensemble, then cropping back to the input size.
pub fn super_resolve(
    graph: &Graph<f32>,
    image: &Tensor<f32>,
    opts: &InferOptions,
) -> Result<Tensor<f32>> {
    let (h, w) = (image.shape.h, image.shape.w);
    let ph = (4 - h % 4) % 4;
    let pw = (4 - w % 4) % 4;
    let padded = if ph > 0 || pw > 0 {
        pad_reflect(image, 0, ph, 0, pw)
    } else {
        image.clone()
    };
    let run = |img: &Tensor<f32>| -> Result<Tensor<f32>> {
        match opts.tile {
            Some(cfg) => tiled_infer(graph, img, cfg),
            None => graph.forward(img),
        }
    };
    let sr = if opts.ensemble {
        self_ensemble(run, &padded)?
    } else {
        run(&padded)?
    };
    Ok(if ph > 0 || pw > 0 {
        crop(&sr, 0, 0, h, w)
    } else {
        sr
    })
}

#[derive(Clone, Debug)]
pub struct ImageMetric {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub split: String,
}

#[derive(Clone, Debug, Default)]
pub struct MetricReport {
    pub per_image: Vec<ImageMetric>,
    /// Pairs skipped with a reason (size mismatch, unreadable file).
    pub warnings: Vec<String>,
}

impl MetricReport {
    pub fn mean_psnr(&self) -> f64 {
        mean(self.per_image.iter().map(|m| m.psnr))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.per_image.iter().map(|m| m.ssim))
    }

    /// Aggregates per split tag, in first-appearance order.
    pub fn split_aggregates(&self) -> Vec<(String, f64, f64, usize)> {
        let mut order: Vec<String> = Vec::new();
        for m in &self.per_image {
            if !order.contains(&m.split) {
                order.push(m.split.clone());
            }
        }
        order
            .into_iter()
            .map(|tag| {
                let members: Vec<&ImageMetric> =
                    self.per_image.iter().filter(|m| m.split == tag).collect();
                let p = mean(members.iter().map(|m| m.psnr));
                let s = mean(members.iter().map(|m| m.ssim));
                (tag, p, s, members.len())
            })
            .collect()
    }

    /// Line-oriented serialization; field order is fixed:
    /// `image<TAB>id<TAB>psnr<TAB>ssim<TAB>split` per image in manifest
    /// order, then `aggregate<TAB>all` and per-split aggregate records, then
    /// `warning` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for m in &self.per_image {
            writeln!(
                out,
                "image\t{}\t{}\t{}\t{}",
                m.id,
                fmt_db(m.psnr),
                fmt_val(m.ssim),
                m.split
            )
            .unwrap();
        }
        writeln!(
            out,
            "aggregate\tall\t{}\t{}\t{}",
            fmt_db(self.mean_psnr()),
            fmt_val(self.mean_ssim()),
            self.per_image.len()
        )
        .unwrap();
        for (tag, p, s, n) in self.split_aggregates() {
            writeln!(out, "aggregate\t{tag}\t{}\t{}\t{n}", fmt_db(p), fmt_val(s)).unwrap();
        }
        for wmsg in &self.warnings {
            writeln!(out, "warning\t{wmsg}").unwrap();
        }
        out
    }
}

fn mean(vals: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in vals {
        sum += v;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

fn fmt_val(v: f64) -> String {
    format!("{v:.6}")
}

#[derive(Clone, Copy, Debug, Default)]
pub struct EvalOptions {
    pub infer: InferOptions,
    pub y_channel: bool,
}

impl EvalOptions {
    pub fn plain() -> Self {
        EvalOptions {
            infer: InferOptions {
                ensemble: false,
                tile: None,
            },
            y_channel: false,
        }
    }
}

/// Evaluates a model over every manifest pair with an HR reference.
/// Per-image work is parallel; results are merged in manifest order.
pub fn evaluate(
    graph: &Graph<f32>,
    manifest: &DatasetManifest,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    let results: Vec<std::result::Result<ImageMetric, String>> = manifest
        .entries
        .par_iter()
        .map(|entry| {
            let hr_path = match &entry.hr_path {
                Some(p) => p,
                None => return Err(format!("{}: no HR reference", entry.id)),
            };
            let lr = read_image(&entry.lr_path).map_err(|e| format!("{}: {e}", entry.id))?;
            let hr = read_image(hr_path).map_err(|e| format!("{}: {e}", entry.id))?;
            if lr.width != hr.width || lr.height != hr.height {
                return Err(format!(
                    "{}: size mismatch {}x{} vs {}x{}",
                    entry.id, lr.width, lr.height, hr.width, hr.height
                ));
            }
            let sr = super_resolve(graph, &lr.to_tensor(), &opts.infer)
                .map_err(|e| format!("{}: {e}", entry.id))?;
            let hr_t = hr.to_tensor();
            let p = if opts.y_channel {
                psnr_y(&sr, &hr_t)
            } else {
                psnr(&sr, &hr_t)
            }
            .map_err(|e| format!("{}: {e}", entry.id))?;
            let s = ssim(&sr, &hr_t).map_err(|e| format!("{}: {e}", entry.id))?;
            Ok(ImageMetric {
                id: entry.id.clone(),
                psnr: p,
                ssim: s,
                split: entry
                    .camera_tag
                    .clone()
                    .unwrap_or_else(|| entry.split.clone()),
            })
        })
        .collect();

    let mut report = MetricReport::default();
    for r in results {
        match r {
            Ok(m) => report.per_image.push(m),
            Err(w) => report.warnings.push(w),
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_network, BodyKind, NetworkSpec};
    use crate::ops::ConvParams;
    use crate::rng::SeededRng;
    use crate::tensor::Shape;
    use rand::Rng;
    use std::cell::Cell;

    fn random_image(h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = SeededRng::new(seed).stream("eval-test");
        Tensor::from_vec(
            Shape::new(1, 3, h, w),
            (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn ensemble_of_identity_is_identity() {
        let x = random_image(12, 16, 1);
        let out = self_ensemble(|t| Ok(t.clone()), &x).unwrap();
        assert!(out.max_abs_diff(&x) <= 1e-6);
    }

    #[test]
    fn ensemble_runs_exactly_eight_forward_passes() {
        let x = random_image(8, 8, 2);
        let count = Cell::new(0usize);
        self_ensemble(
            |t| {
                count.set(count.get() + 1);
                Ok(t.clone())
            },
            &x,
        )
        .unwrap();
        assert_eq!(count.get(), 8);
    }

    #[test]
    fn ensemble_matches_bruteforce_on_asymmetric_conv() {
        // fixed asymmetric 3x3 kernel, brute-force loop over the 8 cases
        let mut w = Tensor::zeros(Shape::new(3, 3, 3, 3));
        for (i, v) in w.data.iter_mut().enumerate() {
            *v = ((i * 37 % 23) as f32 - 11.0) / 23.0;
        }
        let conv = ConvParams {
            weights: w,
            bias: vec![0.1, -0.2, 0.05],
            stride: 1,
        };
        let model = |t: &Tensor<f32>| crate::ops::conv2d(t, &conv);
        let x = random_image(10, 14, 3);

        let got = self_ensemble(model, &x).unwrap();

        let mut acc = Tensor::zeros(x.shape);
        for t in GeometricTransform::all() {
            let out = invert_geometric(t, &model(&apply_geometric(t, &x)).unwrap());
            for (a, b) in acc.data.iter_mut().zip(&out.data) {
                *a += *b / 8.0;
            }
        }
        assert!(got.max_abs_diff(&acc) <= 1e-6);
    }

    fn tiny_msrn(seed: u64) -> Graph<f32> {
        let mut rng = SeededRng::new(seed).stream("init");
        let spec = NetworkSpec::custom(BodyKind::Residual, [0, 2, 2], [3, 8, 8]);
        build_network(&spec, &mut rng).unwrap()
    }

    #[test]
    fn single_tile_equals_direct_forward() {
        let g = tiny_msrn(5);
        let x = random_image(32, 32, 6);
        let overlap = min_overlap(&g);
        let tiled = tiled_infer(&g, &x, TileConfig { tile: 32, overlap }).unwrap();
        let direct = g.forward(&x).unwrap();
        assert_eq!(tiled.data, direct.data);
    }

    #[test]
    fn two_by_two_tiling_matches_direct_forward() {
        let g = tiny_msrn(9);
        let x = random_image(48, 64, 10);
        let overlap = min_overlap(&g);
        let tiled = tiled_infer(&g, &x, TileConfig { tile: 32, overlap }).unwrap();
        let direct = g.forward(&x).unwrap();
        assert!(tiled.max_abs_diff(&direct) < 1e-5);
    }

    #[test]
    fn tiling_rejects_zero_or_small_overlap() {
        let g = tiny_msrn(5);
        let x = random_image(16, 16, 7);
        assert!(tiled_infer(
            &g,
            &x,
            TileConfig {
                tile: 16,
                overlap: 0
            }
        )
        .is_err());
        assert!(tiled_infer(
            &g,
            &x,
            TileConfig {
                tile: 15,
                overlap: 16
            }
        )
        .is_err());
    }

    #[test]
    fn report_aggregates_are_means() {
        let report = MetricReport {
            per_image: vec![
                ImageMetric {
                    id: "a".into(),
                    psnr: 30.0,
                    ssim: 0.9,
                    split: "cam1".into(),
                },
                ImageMetric {
                    id: "b".into(),
                    psnr: 20.0,
                    ssim: 0.7,
                    split: "cam2".into(),
                },
            ],
            warnings: vec![],
        };
        assert_eq!(report.mean_psnr(), 25.0);
        assert!((report.mean_ssim() - 0.8).abs() < 1e-12);
        let splits = report.split_aggregates();
        assert_eq!(splits.len(), 2);
        assert_eq!(splits[0], ("cam1".into(), 30.0, 0.9, 1));
        let text = report.to_text();
        assert!(text.contains("aggregate\tall\t25.0000"));
    }

    #[test]
    fn infinite_psnr_propagates_to_mean() {
        let report = MetricReport {
            per_image: vec![ImageMetric {
                id: "a".into(),
                psnr: f64::INFINITY,
                ssim: 1.0,
                split: "v".into(),
            }],
            warnings: vec![],
        };
        assert!(report.mean_psnr().is_infinite());
        assert!(report.to_text().contains("inf"));
    }
}
