//! Closed-form parameter and FLOP accounting for a [`ModelConfig`].
//!
//! Counting rules: a multiply-accumulate is 2 FLOPs; an FFT or inverse FFT
//! of length `N` costs `5 N log2 N` per column; the phase-only cross power is
//! 13 FLOPs per complex element (conjugate product 6, magnitude 4, guard 1,
//! division 2); softmax 5, layer norm 8 and GELU 8 per element; ReLU, PReLU,
//! residual adds, bias adds and the attention gate 1 per element (PReLU 2).
//! Input standardization is 6 per pixel. Counts are per sample pair.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{Activation, ModelConfig};

/// Published totals for the full-scale configuration.
pub const REFERENCE_PARAMS: f64 = 26.46e6;
pub const REFERENCE_FLOPS: f64 = 13.32e9;
pub const PARAM_BAND: f64 = 0.20;
pub const FLOP_BAND: f64 = 0.30;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRow {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Deviation {
    pub layer: String,
    pub params: u64,
    pub params_unshared: u64,
    pub flops: u64,
    pub flops_unshared: u64,
    pub cause: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceComparison {
    pub reference_params: f64,
    pub reference_flops: f64,
    /// Relative deviation, percent.
    pub params_deviation: f64,
    pub flops_deviation: f64,
    pub params_within_band: bool,
    pub flops_within_band: bool,
    /// Totals with every head owning separate full-width value, query and
    /// key convolutions.
    pub unshared_params: u64,
    pub unshared_flops: u64,
    pub deviations: Vec<Deviation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub total_params: u64,
    pub total_flops: u64,
    pub per_layer: Vec<LayerRow>,
    pub notes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferenceComparison>,
}

fn log2(n: usize) -> u64 {
    n.trailing_zeros() as u64
}

fn rows(cfg: &ModelConfig) -> Vec<LayerRow> {
    let d = cfg.embed_dim as u64;
    let p2 = (cfg.patch_size * cfg.patch_size) as u64;
    let ne = cfg.n_tokens() as u64;
    let n = cfg.n_heads as u64;
    let hd = cfg.head_dim() as u64;
    let h = cfg.kernel_size() as u64;
    let m = cfg.mlp_width() as u64;
    let c = cfg.n_classes as u64;
    let pixels = (cfg.image_size * cfg.image_size) as u64;
    let in_g = if cfg.grouped_heads { hd } else { d };
    let conv_params = hd * in_g * h + hd;
    let conv_flops = 2 * ne * hd * in_g * h + ne * hd;
    // Convolutions per head. A shared query reuses the value output and a
    // cross-channel key is the other channel's value output, so each owned
    // convolution runs exactly once.
    let owned = 1 + !cfg.share_vq_weights as u64 + !cfg.cross_channel_key as u64;
    let act = match cfg.activation {
        Activation::Gelu => 8,
        Activation::Relu => 1,
    };
    let fft = 5 * ne * log2(cfg.n_tokens());

    let mut out = Vec::new();
    let mut row = |name: String, params: u64, flops: u64| out.push(LayerRow { name, params, flops });
    for ch in 0..2 {
        let std_flops = if cfg.standardize_input { 6 * pixels } else { 0 };
        row(format!("embed.ch{ch}"), d * p2 + d, std_flops + 2 * ne * p2 * d + ne * d);
    }
    for b in 0..cfg.n_blocks {
        for ch in 0..2 {
            let base = format!("block.{b}.ch{ch}");
            row(format!("{base}.attention.conv"), n * owned * conv_params, n * owned * conv_flops);
            row(format!("{base}.attention.fft"), 0, 3 * d * fft);
            row(format!("{base}.attention.poc"), 0, 13 * ne * d);
            row(format!("{base}.attention.gate"), 0, 5 * ne * d + ne * d);
            row(format!("{base}.norm1"), 2 * d, ne * d + 8 * ne * d);
            row(
                format!("{base}.mlp"),
                d * m + m + m * d + d,
                2 * ne * d * m + ne * m + act * ne * m + 2 * ne * m * d + ne * d,
            );
            row(format!("{base}.norm2"), 2 * d, ne * d + 8 * ne * d);
        }
    }
    for ch in 0..2 {
        row(format!("pool.ch{ch}"), 0, ne * d + d);
    }
    row("classifier.hidden".into(), 2 * d * d + d, 2 * 2 * d * d + d);
    row("classifier.prelu".into(), 1, 2 * d);
    row("classifier.out".into(), d * c + c, 2 * d * c + c);
    out
}

fn unshared(cfg: &ModelConfig) -> ModelConfig {
    ModelConfig {
        share_vq_weights: false,
        grouped_heads: false,
        cross_channel_key: false,
        ..cfg.clone()
    }
}

fn knob_causes(cfg: &ModelConfig) -> String {
    let mut causes = Vec::new();
    if cfg.grouped_heads {
        causes.push("each head convolves only its d/n input columns");
    }
    if cfg.share_vq_weights {
        causes.push("query reuses the value convolution");
    }
    if cfg.cross_channel_key {
        causes.push("key is the other channel's value convolution");
    }
    causes.join("; ")
}

/// Per-layer parameters and FLOPs. Pure function of the config.
pub fn complexity(cfg: &ModelConfig) -> Result<ComplexityReport> {
    cfg.validate()?;
    let per_layer = rows(cfg);
    let mut notes = vec![
        "FLOPs are per forward pass of one (forehead, periocular) pair; the published figure may be per batch.".to_string(),
        "Inputs are single-channel grayscale; a 3-channel input would triple the patch-embedding multiply count.".to_string(),
        "1 multiply-accumulate = 2 FLOPs; FFT = 5 N log2 N per column.".to_string(),
    ];
    if cfg.standardize_input {
        notes.push("Input standardization counted at 6 FLOPs per pixel.".into());
    }
    Ok(ComplexityReport {
        total_params: per_layer.iter().map(|r| r.params).sum(),
        total_flops: per_layer.iter().map(|r| r.flops).sum(),
        per_layer,
        notes,
        reference: None,
    })
}

pub fn count_params(cfg: &ModelConfig) -> Result<u64> {
    Ok(complexity(cfg)?.total_params)
}

pub fn count_flops(cfg: &ModelConfig) -> Result<u64> {
    Ok(complexity(cfg)?.total_flops)
}

/// [`complexity`] plus a comparison with the published totals, itemizing
/// every layer whose count differs from the fully unshared reading.
pub fn compare_with_reference(cfg: &ModelConfig) -> Result<ComplexityReport> {
    let mut report = complexity(cfg)?;
    let base = complexity(&unshared(cfg))?;
    let cause = knob_causes(cfg);
    let deviations = report
        .per_layer
        .iter()
        .zip(&base.per_layer)
        .filter(|(a, b)| a != b)
        .map(|(a, b)| Deviation {
            layer: a.name.clone(),
            params: a.params,
            params_unshared: b.params,
            flops: a.flops,
            flops_unshared: b.flops,
            cause: cause.clone(),
        })
        .collect();
    let pd = 100.0 * (report.total_params as f64 - REFERENCE_PARAMS) / REFERENCE_PARAMS;
    let fd = 100.0 * (report.total_flops as f64 - REFERENCE_FLOPS) / REFERENCE_FLOPS;
    report.reference = Some(ReferenceComparison {
        reference_params: REFERENCE_PARAMS,
        reference_flops: REFERENCE_FLOPS,
        params_deviation: pd,
        flops_deviation: fd,
        params_within_band: pd.abs() <= 100.0 * PARAM_BAND,
        flops_within_band: fd.abs() <= 100.0 * FLOP_BAND,
        unshared_params: base.total_params,
        unshared_flops: base.total_flops,
        deviations,
    });
    Ok(report)
}

impl fmt::Display for ComplexityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<32} {:>14} {:>18}", "layer", "params", "flops")?;
        for r in &self.per_layer {
            writeln!(f, "{:<32} {:>14} {:>18}", r.name, r.params, r.flops)?;
        }
        writeln!(f, "{:<32} {:>14} {:>18}", "total", self.total_params, self.total_flops)?;
        writeln!(
            f,
            "{:.2} M parameters, {:.2} GFLOPs",
            self.total_params as f64 / 1e6,
            self.total_flops as f64 / 1e9
        )?;
        if let Some(r) = &self.reference {
            writeln!(
                f,
                "reference {:.2} M / {:.2} GFLOPs: deviation {:+.1}% params ({}), {:+.1}% FLOPs ({})",
                r.reference_params / 1e6,
                r.reference_flops / 1e9,
                r.params_deviation,
                if r.params_within_band { "within 20%" } else { "outside 20%" },
                r.flops_deviation,
                if r.flops_within_band { "within 30%" } else { "outside 30%" },
            )?;
            writeln!(
                f,
                "fully unshared convolutions would give {:.2} M / {:.2} GFLOPs",
                r.unshared_params as f64 / 1e6,
                r.unshared_flops as f64 / 1e9
            )?;
            for d in &r.deviations {
                writeln!(
                    f,
                    "  {:<30} params {} vs {}, flops {} vs {}: {}",
                    d.layer, d.params, d.params_unshared, d.flops, d.flops_unshared, d.cause
                )?;
            }
        }
        for n in &self.notes {
            writeln!(f, "note: {n}")?;
        }
        Ok(())
    }
}
