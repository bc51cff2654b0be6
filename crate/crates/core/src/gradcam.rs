//! Grad-CAM attribution: channel-weighted feature maps, bilinear
//! upsampling to input resolution, and red-yellow overlays.

use alloc::vec;
use alloc::vec::Vec;

use libm::{floor, round};

use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::image::ImageGray;
use crate::manifest::CueBox;
use crate::ops::Mode;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Spatial attribution map with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// RGB image, row-major, 3 bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OverlayImage {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

/// Grad-CAM at `target_node` (default: the last block's output). The
/// channel weights are spatial means of d(logit_class)/d(activation);
/// the map is the ReLU of the weighted channel sum, scaled so its peak
/// is 1 (an all-nonpositive map comes back as all zeros).
pub fn gradcam(
    model: &mut ModelGraph,
    input: &Tensor,
    class: usize,
    target_node: Option<usize>,
) -> Result<Heatmap> {
    if class >= model.config.num_classes {
        return Err(Error::Param(alloc::format!(
            "class {class} out of range for {} classes",
            model.config.num_classes
        )));
    }
    let shape = input.shape();
    if shape.len() != 3 {
        return Err(Error::Shape {
            op: "gradcam",
            axis: "rank",
            expected: 3,
            got: shape.len(),
        });
    }
    let batch = Tensor::from_vec(
        &[1, shape[0], shape[1], shape[2]],
        input.data().to_vec(),
    );
    let target = target_node.unwrap_or_else(|| model.default_cam_target());
    if target >= model.nodes.len() {
        return Err(Error::Param(alloc::format!("no node {target} in graph")));
    }
    let mut rng = Rng::new(0); // eval mode draws nothing
    let (logits, cache) = model.forward(&batch, Mode::Eval, &mut rng)?;
    let mut d_logits = Tensor::zeros(logits.shape());
    d_logits.data_mut()[class] = 1.0;
    let back = model.backward(&cache, &d_logits, Some(target))?;
    let grad = back
        .captured
        .ok_or_else(|| Error::Param("target node received no gradient".into()))?;
    let act = &cache.outputs[target];
    let (_, c, h, w) = act.dims4("gradcam")?;
    let plane = h * w;

    let mut map = vec![0.0f64; plane];
    for ch in 0..c {
        let a = &act.data()[ch * plane..(ch + 1) * plane];
        let g = &grad.data()[ch * plane..(ch + 1) * plane];
        let alpha = g.iter().sum::<f64>() / plane as f64;
        for (m, &v) in map.iter_mut().zip(a) {
            *m += alpha * v;
        }
    }
    let mut peak = 0.0f64;
    for m in map.iter_mut() {
        if *m < 0.0 {
            *m = 0.0;
        }
        if *m > peak {
            peak = *m;
        }
    }
    if peak > 0.0 {
        for m in map.iter_mut() {
            *m /= peak;
        }
    }
    Ok(Heatmap {
        width: w,
        height: h,
        values: map,
    })
}

/// Corner-aligned bilinear upsampling: output corner cells reproduce the
/// input corners exactly.
pub fn upsample_bilinear(map: &Heatmap, width: usize, height: usize) -> Result<Heatmap> {
    if width == 0 || height == 0 {
        return Err(Error::Param("upsample target must be >= 1".into()));
    }
    let sx = if width > 1 {
        (map.width - 1) as f64 / (width - 1) as f64
    } else {
        0.0
    };
    let sy = if height > 1 {
        (map.height - 1) as f64 / (height - 1) as f64
    } else {
        0.0
    };
    let mut values = Vec::with_capacity(width * height);
    for oy in 0..height {
        let y = oy as f64 * sy;
        let y0 = floor(y) as usize;
        let y1 = (y0 + 1).min(map.height - 1);
        let fy = y - y0 as f64;
        for ox in 0..width {
            let x = ox as f64 * sx;
            let x0 = floor(x) as usize;
            let x1 = (x0 + 1).min(map.width - 1);
            let fx = x - x0 as f64;
            let v = map.get(x0, y0) * (1.0 - fx) * (1.0 - fy)
                + map.get(x1, y0) * fx * (1.0 - fy)
                + map.get(x0, y1) * (1.0 - fx) * fy
                + map.get(x1, y1) * fx * fy;
            values.push(v);
        }
    }
    Ok(Heatmap {
        width,
        height,
        values,
    })
}

/// Blend the heatmap over a grayscale base: heat color runs red (v=1)
/// through yellow (v=0), mixed in proportionally to alpha * v so cold
/// regions keep the underlying image.
pub fn colorize_overlay(base: &ImageGray, map: &Heatmap, alpha: f64) -> Result<OverlayImage> {
    if base.width != map.width || base.height != map.height {
        return Err(Error::Shape {
            op: "colorize_overlay",
            axis: "width",
            expected: base.width,
            got: map.width,
        });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Param("overlay alpha must be in [0, 1]".into()));
    }
    let mut rgb = Vec::with_capacity(base.width * base.height * 3);
    for (i, &g) in base.pixels.iter().enumerate() {
        let v = map.values[i].clamp(0.0, 1.0);
        let mix = alpha * v;
        let heat = [255.0, 255.0 * (1.0 - v), 0.0];
        for &h in &heat {
            let out = (1.0 - mix) * g as f64 + mix * h;
            rgb.push(round(out).clamp(0.0, 255.0) as u8);
        }
    }
    Ok(OverlayImage {
        width: base.width,
        height: base.height,
        rgb,
    })
}

/// Fraction of the heatmap's total mass inside a box. A zero-mass map
/// reports 0.
pub fn mass_fraction(map: &Heatmap, cue: &CueBox) -> f64 {
    let mut total = 0.0;
    let mut inside = 0.0;
    for y in 0..map.height {
        for x in 0..map.width {
            let v = map.get(x, y);
            total += v;
            if x as u32 >= cue.x
                && (x as u32) < cue.x + cue.w
                && y as u32 >= cue.y
                && (y as u32) < cue.y + cue.h
            {
                inside += v;
            }
        }
    }
    if total == 0.0 {
        0.0
    } else {
        inside / total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{DenseNetConfig, ModelGraph, ModelKind};

    fn toy_model() -> ModelGraph {
        ModelGraph::build(DenseNetConfig::toy(32), ModelKind::Dense, 11).unwrap()
    }

    fn random_input(seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::from_vec(&[1, 32, 32], (0..32 * 32).map(|_| rng.uniform()).collect())
    }

    #[test]
    fn heatmap_normalized_and_deterministic() {
        let mut m = toy_model();
        let x = random_input(4);
        let a = gradcam(&mut m, &x, 0, None).unwrap();
        let b = gradcam(&mut m, &x, 0, None).unwrap();
        assert_eq!(a, b);
        assert!(a.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let peak = a.values.iter().cloned().fold(0.0, f64::max);
        assert!(peak == 1.0 || peak == 0.0);
        // target defaults to the last block output; the toy model has one
        // transition after a 32x32 stem, so that map is 16x16
        assert_eq!((a.width, a.height), (16, 16));
    }

    #[test]
    fn class_out_of_range_rejected() {
        let mut m = toy_model();
        assert!(gradcam(&mut m, &random_input(1), 5, None).is_err());
    }

    #[test]
    fn upsample_matches_hand_computed_grid() {
        // 2x2 -> 3x3 corner-aligned: center is the mean of all four
        let map = Heatmap {
            width: 2,
            height: 2,
            values: alloc::vec![0.0, 1.0, 1.0, 0.0],
        };
        let up = upsample_bilinear(&map, 3, 3).unwrap();
        assert_eq!(up.get(0, 0), 0.0);
        assert_eq!(up.get(2, 0), 1.0);
        assert_eq!(up.get(0, 2), 1.0);
        assert_eq!(up.get(2, 2), 0.0);
        assert!((up.get(1, 1) - 0.5).abs() < 1e-12);
        assert!((up.get(1, 0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn upsample_identity_when_same_size() {
        let map = Heatmap {
            width: 3,
            height: 2,
            values: alloc::vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
        };
        assert_eq!(upsample_bilinear(&map, 3, 2).unwrap(), map);
    }

    #[test]
    fn overlay_color_formula() {
        let base = ImageGray {
            width: 2,
            height: 1,
            pixels: alloc::vec![100, 100],
        };
        let map = Heatmap {
            width: 2,
            height: 1,
            values: alloc::vec![0.0, 1.0],
        };
        let o = colorize_overlay(&base, &map, 0.5).unwrap();
        // v = 0: untouched gray
        assert_eq!(&o.rgb[0..3], &[100, 100, 100]);
        // v = 1, alpha 0.5: halfway toward pure red
        assert_eq!(&o.rgb[3..6], &[178, 50, 50]);
        assert!(colorize_overlay(&base, &map, 1.5).is_err());
    }

    #[test]
    fn mass_fraction_counts_only_the_box() {
        let map = Heatmap {
            width: 4,
            height: 1,
            values: alloc::vec![1.0, 3.0, 0.0, 0.0],
        };
        let f = mass_fraction(
            &map,
            &CueBox {
                x: 1,
                y: 0,
                w: 1,
                h: 1,
            },
        );
        assert!((f - 0.75).abs() < 1e-12);
        let zero = Heatmap {
            width: 2,
            height: 1,
            values: alloc::vec![0.0, 0.0],
        };
        assert_eq!(mass_fraction(&zero, &CueBox { x: 0, y: 0, w: 2, h: 1 }), 0.0);
    }
}
