//! Gate analysis: how much each block's output contributes to the prompts
//! entering the last block, plus attention-map exports.
//!
//! With gates `g¹ … g^{L-1}` the prompt input to the last block unrolls to
//!
//! ```text
//! Z^{L-1} = ∏(1 − g^l)·P + Σ_{l<L-1} (∏_{m>l} (1 − g^m))·g^l·Z̃^l + g^{L-1}·Z̃^{L-1}
//! ```
//!
//! where `Z̃^l` is block `l`'s raw prompt output. The coefficient of `Z̃^l` is
//! its accumulated weight; normalizing those weights gives selection ratios.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::{ForwardOptions, PromptTrace, TunedModel};
use crate::tensor::Tensor;

fn check_gates(gates: &[f64]) -> Result<()> {
    for (l, &g) in gates.iter().enumerate() {
        if !(0.0..=1.0).contains(&g) {
            return Err(Error::Domain(format!("gate {} = {g} outside [0, 1]", l + 1)));
        }
    }
    Ok(())
}

/// `g̃^l = (∏_{m>l} (1 − g^m))·g^l`; the last weight is the last gate itself.
pub fn accumulated_weights(gates: &[f64]) -> Result<Vec<f64>> {
    check_gates(gates)?;
    let mut out = vec![0.0; gates.len()];
    let mut tail = 1.0;
    for l in (0..gates.len()).rev() {
        out[l] = tail * gates[l];
        tail *= 1.0 - gates[l];
    }
    Ok(out)
}

/// Weight left on the initial prompts: `∏(1 − g^l)`.
pub fn residual_weight(gates: &[f64]) -> Result<f64> {
    check_gates(gates)?;
    Ok(gates.iter().map(|g| 1.0 - g).product())
}

/// `r^l = g̃^l / Σ g̃`. All-zero weights are an error rather than NaN.
pub fn selection_ratio(accumulated: &[f64]) -> Result<Vec<f64>> {
    if let Some(w) = accumulated.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(Error::Domain(format!("accumulated weight {w} is not a non-negative number")));
    }
    let total: f64 = accumulated.iter().sum();
    if total <= 0.0 {
        return Err(Error::DegenerateGates);
    }
    Ok(accumulated.iter().map(|w| w / total).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionReport {
    pub run_id: String,
    pub gates: Vec<f64>,
    pub accumulated: Vec<f64>,
    pub ratios: Vec<f64>,
    /// Weight of the initial prompts, reported apart from the ratios.
    pub residual_weight: f64,
}

impl SelectionReport {
    pub fn from_gates(run_id: impl Into<String>, gates: &[f64]) -> Result<Self> {
        let accumulated = accumulated_weights(gates)?;
        let ratios = selection_ratio(&accumulated)?;
        Ok(Self {
            run_id: run_id.into(),
            gates: gates.to_vec(),
            residual_weight: residual_weight(gates)?,
            accumulated,
            ratios,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("selection report: {e}")))
    }
}

/// Rebuilds the prompt input of the last block from the recorded block
/// outputs and the gate values, without re-running any block.
pub fn closed_form_aggregate(trace: &PromptTrace, gates: &[f64]) -> Result<Tensor> {
    let blocks = trace.blocks.len();
    if blocks == 0 || gates.len() + 1 != blocks {
        return Err(Error::State(format!(
            "trace has {blocks} blocks but {} gates were given",
            gates.len()
        )));
    }
    let weights = accumulated_weights(gates)?;
    let mut out: Vec<f64> = trace.initial.data().to_vec();
    let residual = residual_weight(gates)?;
    out.iter_mut().for_each(|v| *v *= residual);
    for (l, w) in weights.iter().enumerate() {
        let z = &trace.blocks[l].output;
        if z.shape() != trace.initial.shape() {
            return Err(Error::State(format!("trace entry {l} has shape {:?}", z.shape())));
        }
        for (o, v) in out.iter_mut().zip(z.data()) {
            *o += w * v;
        }
    }
    Tensor::new(trace.initial.shape().to_vec(), out)
}

/// CLS-row attention over the patch grid for one block and head.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub block: usize,
    /// `None` for the mean over heads.
    pub head: Option<usize>,
    pub grid: usize,
    /// Row-major `grid × grid`; sums to 1.
    pub values: Vec<f64>,
}

impl AttentionMap {
    pub fn file_name(&self) -> String {
        match self.head {
            Some(h) => format!("attn_block{}_head{h}.csv", self.block),
            None => format!("attn_block{}_mean.csv", self.block),
        }
    }

    /// Header `block=<b>,head=<h|mean>,rows=<G>x<G>`, then the grid.
    pub fn to_csv(&self) -> String {
        let head = self.head.map_or("mean".to_string(), |h| h.to_string());
        let mut s = format!("block={},head={head},rows={}x{}\n", self.block, self.grid, self.grid);
        for row in self.values.chunks(self.grid) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }
}

/// Attention of the CLS query over patch keys for the first image in
/// `image`, restricted to patch columns and renormalized to sum to 1.
pub fn attention_maps(model: &TunedModel, blocks: &[usize], image: &Tensor) -> Result<Vec<AttentionMap>> {
    let l = model.vit.num_blocks;
    for &b in blocks {
        if b >= l {
            return Err(Error::OutOfBounds {
                what: "block",
                index: b,
                len: l,
            });
        }
    }
    let len = model.vit.image_len();
    if image.len() < len || image.len() % len != 0 {
        return Err(Error::Config(format!(
            "image buffer of {} values does not hold whole images of {len} values",
            image.len()
        )));
    }
    let (s, c) = (model.vit.image_size, model.vit.channels);
    let first = Tensor::new([1, s, s, c], image.data()[..len].to_vec())?;
    let out = model.forward(
        &first,
        &ForwardOptions {
            capture_attention: true,
            ..Default::default()
        },
    )?;
    let grid = model.vit.grid();
    let n = model.vit.num_patches();
    let np = model.tuning.num_prompts;
    let heads = model.vit.num_heads;
    let mut maps = Vec::new();
    for &b in blocks {
        let st = out
            .attention
            .iter()
            .find(|a| a.block == b)
            .ok_or_else(|| Error::State(format!("no attention captured for block {b}")))?;
        let t = st.scores.shape()[3];
        let patch_start = 1 + np;
        if patch_start + n != t {
            return Err(Error::State(format!("attention over {t} tokens, expected {}", patch_start + n)));
        }
        let mut mean = vec![0.0; n];
        for h in 0..heads {
            // scores are [B, h, T, T]; CLS is query row 0 of sample 0.
            let row = &st.scores.data()[h * t * t..h * t * t + t];
            let patches = &row[patch_start..];
            let total: f64 = patches.iter().sum();
            let values: Vec<f64> = patches.iter().map(|v| v / total).collect();
            for (m, v) in mean.iter_mut().zip(&values) {
                *m += v / heads as f64;
            }
            maps.push(AttentionMap {
                block: b,
                head: Some(h),
                grid,
                values,
            });
        }
        maps.push(AttentionMap {
            block: b,
            head: None,
            grid,
            values: mean,
        });
    }
    Ok(maps)
}

/// Writes one CSV per map into `dir` and returns the paths.
pub fn export_attention_maps(
    model: &TunedModel,
    blocks: &[usize],
    image: &Tensor,
    dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    attention_maps(model, blocks, image)?
        .into_iter()
        .map(|m| {
            let path = dir.join(m.file_name());
            std::fs::write(&path, m.to_csv()).map_err(|e| Error::io(&path, e))?;
            Ok(path)
        })
        .collect()
}

/// Bar chart of selection ratios; bar `l` is `r^l · max_height` tall.
pub fn ratio_bar_chart_svg(ratios: &[f64], max_height: f64) -> String {
    let bar = 40.0;
    let gap = 10.0;
    let margin = 20.0;
    let width = margin * 2.0 + ratios.len() as f64 * (bar + gap);
    let height = max_height + margin * 2.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    for (i, r) in ratios.iter().enumerate() {
        let h = r * max_height;
        let x = margin + i as f64 * (bar + gap);
        let y = margin + max_height - h;
        let _ = writeln!(
            s,
            r#"  <rect data-block="{}" x="{x:.3}" y="{y:.3}" width="{bar}" height="{h:.3}" fill="steelblue"/>"#,
            i + 1
        );
        let _ = writeln!(
            s,
            r#"  <text x="{:.3}" y="{:.3}" font-size="10" text-anchor="middle">{}</text>"#,
            x + bar / 2.0,
            height - 4.0,
            i + 1
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accumulated_weights_examples() {
        assert_eq!(accumulated_weights(&[1.0, 1.0, 1.0]).unwrap(), vec![0.0, 0.0, 1.0]);
        assert_eq!(accumulated_weights(&[0.5; 3]).unwrap(), vec![0.125, 0.25, 0.5]);
        assert_eq!(accumulated_weights(&[0.0; 3]).unwrap(), vec![0.0; 3]);
        assert!(matches!(accumulated_weights(&[0.5, 1.2]), Err(Error::Domain(_))));
    }

    #[test]
    fn ratio_examples() {
        let r = selection_ratio(&[0.125, 0.25, 0.5]).unwrap();
        for (a, b) in r.iter().zip([1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(selection_ratio(&[0.0, 0.0, 1.0]).unwrap(), vec![0.0, 0.0, 1.0]);
        assert!(matches!(selection_ratio(&[0.0; 3]), Err(Error::DegenerateGates)));
    }

    #[test]
    fn report_round_trips() {
        let r = SelectionReport::from_gates("run", &[0.5, 0.5, 0.5]).unwrap();
        assert_eq!(r.residual_weight, 0.125);
        assert_eq!(r.accumulated[2], r.gates[2]);
        assert_eq!(SelectionReport::from_json(&r.to_json()).unwrap(), r);
    }

    #[test]
    fn svg_heights_follow_ratios() {
        let svg = ratio_bar_chart_svg(&[0.25, 0.75], 200.0);
        assert!(svg.contains(r#"height="50.000""#));
        assert!(svg.contains(r#"height="150.000""#));
    }
}
