use std::path::PathBuf;

use clap::Args;
use motorintent::dsp::FilterSpec;
use motorintent::pipeline::{ChannelSelection, FeatureKind, PipelineConfig};

use crate::error::CliError;

/// Pipeline settings: an optional TOML file, then individual overrides.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// TOML file with pipeline settings (see `motorintent config`).
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Window length in seconds.
    #[arg(long, value_name = "SECONDS")]
    pub window: Option<f64>,

    /// Pass band as LOW-HIGH in Hz, e.g. 5-15.
    #[arg(long, value_name = "LOW-HIGH", value_parser = parse_band)]
    pub band: Option<(f64, f64)>,

    /// Features: tangent, covariance or raw.
    #[arg(long, value_parser = parse_feature)]
    pub feature: Option<FeatureKind>,

    /// Skip sample differencing.
    #[arg(long)]
    pub no_derivative: bool,

    /// SVM box constraint.
    #[arg(long)]
    pub c: Option<f64>,

    /// RBF kernel width.
    #[arg(long)]
    pub gamma: Option<f64>,

    /// Score threshold for issuing a class, in (0.5, 1].
    #[arg(long)]
    pub delta: Option<f64>,

    /// Vote queue length.
    #[arg(long)]
    pub q: Option<usize>,

    /// Comma-separated electrode names, or "all".
    #[arg(long, value_name = "NAMES")]
    pub channels: Option<String>,

    /// Fraction of trials used for training.
    #[arg(long)]
    pub split: Option<f64>,

    /// Seed for the trial split.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Distance in samples between training windows.
    #[arg(long)]
    pub train_stride: Option<usize>,

    /// Distance in samples between evaluated test windows.
    #[arg(long)]
    pub eval_stride: Option<usize>,
}

pub fn parse_band(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s
        .split_once('-')
        .ok_or_else(|| format!("expected LOW-HIGH, got {s:?}"))?;
    let lo: f64 = lo
        .trim()
        .parse()
        .map_err(|e| format!("bad low edge {lo:?}: {e}"))?;
    let hi: f64 = hi
        .trim()
        .parse()
        .map_err(|e| format!("bad high edge {hi:?}: {e}"))?;
    Ok((lo, hi))
}

fn parse_feature(s: &str) -> Result<FeatureKind, String> {
    match s.to_ascii_lowercase().as_str() {
        "tangent" => Ok(FeatureKind::Tangent),
        "covariance" => Ok(FeatureKind::Covariance),
        "raw" => Ok(FeatureKind::Raw),
        _ => Err(format!(
            "unknown feature kind {s:?} (tangent, covariance, raw)"
        )),
    }
}

pub fn parse_channels(s: &str) -> ChannelSelection {
    if s.trim().eq_ignore_ascii_case("all") {
        ChannelSelection::All
    } else {
        ChannelSelection::Names(
            s.split(',')
                .map(|c| c.trim().to_string())
                .filter(|c| !c.is_empty())
                .collect(),
        )
    }
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<PipelineConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    CliError::Config(format!("cannot read {}: {e}", path.display()))
                })?;
                toml::from_str(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
            }
            None => PipelineConfig::default(),
        };
        if let Some(w) = self.window {
            cfg.window_seconds = w;
        }
        if let Some((lo, hi)) = self.band {
            cfg.band = FilterSpec {
                low_hz: lo,
                high_hz: hi,
                ..cfg.band
            };
        }
        if let Some(f) = self.feature {
            cfg.feature = f;
        }
        if self.no_derivative {
            cfg.derivative = false;
        }
        if let Some(c) = self.c {
            cfg.svm.c = c;
        }
        if let Some(g) = self.gamma {
            cfg.svm.gamma = g;
        }
        if let Some(d) = self.delta {
            cfg.delta = d;
        }
        if let Some(q) = self.q {
            cfg.q = q;
        }
        if let Some(ch) = &self.channels {
            cfg.channels = parse_channels(ch);
        }
        if let Some(s) = self.split {
            cfg.split = s;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(s) = self.train_stride {
            cfg.train_stride = s;
        }
        if let Some(s) = self.eval_stride {
            cfg.eval_stride = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
