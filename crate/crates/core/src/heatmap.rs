//! CLS attention maps over the patch grid.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::prompt::{AddPoint, PromptSet};
use crate::tensor::Tape;
use crate::vit::{Injection, ViTModel};

/// Head-averaged attention from the CLS query to every patch in `layer`,
/// row-major over the `g×g` grid. The CLS self-weight is dropped, so the
/// cells sum to at most one.
pub fn cls_attention(model: &ViTModel, prompts: Option<&PromptSet>, image: &[f64], layer: usize) -> Result<Vec<f64>> {
    let c = model.config();
    if layer >= c.depth {
        return Err(Error::Contract(format!("layer {layer} outside 0..{}", c.depth)));
    }
    let mut tape = Tape::new();
    let vars = model.register(&mut tape);
    let inj = match prompts {
        Some(p) => p.injection(&mut tape, AddPoint::KeyValue).0,
        None => Injection::None,
    };
    let trace = model.forward(&mut tape, &vars, &[image], &inj)?;
    let n = trace.seq_lens[layer];
    let m = c.n_patches();
    let probs = tape.value(trace.attention[layer]);
    let mut out = vec![0.0; m];
    for h in 0..c.heads {
        let row = &probs[h * n * n..h * n * n + n];
        // Patches are the last m tokens whatever precedes them.
        for (o, v) in out.iter_mut().zip(&row[n - m..]) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= c.heads as f64);
    Ok(out)
}

/// Plain-text `P2` greyscale image, min-max scaled to 0..=255.
pub fn to_pgm(cells: &[f64], side: usize) -> Result<String> {
    if cells.len() != side * side {
        return Err(Error::shape("to_pgm", &[cells.len()], &[side, side]));
    }
    let lo = cells.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = cells.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = format!("P2\n{side} {side}\n255\n");
    for row in cells.chunks(side) {
        let line: Vec<String> = row
            .iter()
            .map(|v| {
                let g = if span > 0.0 { (v - lo) / span * 255.0 } else { 0.0 };
                (g.round() as u8).to_string()
            })
            .collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    Ok(out)
}

/// Raw weights as a grid of comma-separated rows.
pub fn to_csv(cells: &[f64], side: usize) -> String {
    let mut out = String::new();
    for row in cells.chunks(side) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        let _ = writeln!(out, "{}", line.join(","));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_scales_to_full_range() {
        let pgm = to_pgm(&[0.0, 0.25, 0.5, 1.0], 2).unwrap();
        assert_eq!(pgm, "P2\n2 2\n255\n0 64\n128 255\n");
        assert!(to_pgm(&[0.0; 3], 2).is_err());
    }

    #[test]
    fn flat_map_is_black() {
        assert!(to_pgm(&[0.25; 4], 2).unwrap().ends_with("0 0\n0 0\n"));
    }
}
