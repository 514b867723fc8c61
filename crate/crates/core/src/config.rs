//! Model hyperparameters and the ablation switches.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Pooling kernels of the correlation pyramid, finest first.
pub const PYRAMID_KERNELS: [usize; 4] = [1, 2, 4, 8];

macro_rules! string_enum {
    ($(#[$m:meta])* $name:ident { $($(#[$vm:meta])* $variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
        pub enum $name {
            $($(#[$vm])* $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(Error::invalid(
                        stringify!($name),
                        format!(
                            "unknown value `{s}`, expected one of: {}",
                            [$($text),+].join(", ")
                        ),
                    )),
                }
            }
        }
    };
}

string_enum! {
    /// How the iteration seed `V₀` is produced.
    InitMode {
        Zeros => "zeros",
        /// Softmax-weighted expectation of the correlation values themselves.
        CriPaperLiteral => "cri-paper-literal",
        /// Softmax-weighted expectation of candidate positions, minus the pixel coordinate.
        CriSoftArgmax => "cri-soft-argmax",
        /// Learned 3×3 convolution over the lookup features at zero flow.
        FlowHead => "flow-head",
    }
}

string_enum! {
    /// How the orthogonal volumes join the all-pair volume.
    AggregateMode {
        /// Second channel of a `H×W×2×H×W` volume holds `C_v + C_h` broadcast over the lattice.
        BroadcastSum => "broadcast-sum",
        /// Orthogonal volumes are pooled and sampled on their own 1D axes.
        Separate1d => "separate-1d",
    }
}

string_enum! {
    /// Whether the two query projections share weights.
    QueryMode {
        Separate => "separate",
        Same => "same",
    }
}

string_enum! {
    /// Which flow component each regressed orthogonal volume seeds.
    CriAxes {
        /// `C_v` (indexed by candidate column) seeds `u`, `C_h` seeds `v`.
        ColumnsToU => "cv-u,ch-v",
        /// Swapped: `C_v` seeds `v`, `C_h` seeds `u`.
        ColumnsToV => "cv-v,ch-u",
    }
}

string_enum! {
    /// The descent rule used by training.
    OptimizerKind {
        /// Heavy-ball momentum descent.
        Sgd => "sgd",
        /// Adam with decoupled weight decay.
        AdamW => "adamw",
    }
}

impl InitMode {
    pub fn is_cri(self) -> bool {
        matches!(self, InitMode::CriPaperLiteral | InitMode::CriSoftArgmax)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Downsampling factor `d` of the encoders (1, 2, 4 or 8).
    pub downsample: usize,
    /// Feature channels `C`.
    pub channels: usize,
    /// Projected query/key channels `C'`.
    pub cprime: usize,
    /// Context channels, split evenly into hidden-state and input parts.
    pub context_channels: usize,
    pub radius: usize,
    pub scale_corr: bool,
    pub csc: bool,
    pub aggregate: AggregateMode,
    pub queries: QueryMode,
    pub init_mode: InitMode,
    pub cri_axes: CriAxes,
    pub motion_corr: usize,
    pub motion_flow: usize,
    /// Motion feature width including the two raw flow channels.
    pub motion_out: usize,
    /// Only single-level refinement exists; other values are rejected.
    pub gru_levels: usize,
    /// Stop gradients through the flow estimate between iterations.
    pub detach_flow: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            downsample: 4,
            channels: 64,
            cprime: 32,
            context_channels: 64,
            radius: 3,
            scale_corr: true,
            csc: true,
            aggregate: AggregateMode::BroadcastSum,
            queries: QueryMode::Separate,
            init_mode: InitMode::CriSoftArgmax,
            cri_axes: CriAxes::ColumnsToU,
            motion_corr: 64,
            motion_flow: 16,
            motion_out: 48,
            gru_levels: 1,
            detach_flow: true,
        }
    }
}

impl ModelConfig {
    pub fn hidden_channels(&self) -> usize {
        self.context_channels / 2
    }

    pub fn input_context_channels(&self) -> usize {
        self.context_channels - self.hidden_channels()
    }

    pub fn window(&self) -> usize {
        2 * self.radius + 1
    }

    /// Volume channels carried through the pyramid in broadcast-sum mode.
    pub fn volume_channels(&self) -> usize {
        if self.csc && self.aggregate == AggregateMode::BroadcastSum {
            2
        } else {
            1
        }
    }

    /// Number of correlation features the lookup produces per pixel.
    pub fn lookup_features(&self) -> usize {
        let s = self.window();
        let levels = PYRAMID_KERNELS.len();
        match (self.csc, self.aggregate) {
            (false, _) => levels * s * s,
            (true, AggregateMode::BroadcastSum) => levels * 2 * s * s,
            (true, AggregateMode::Separate1d) => levels * (s * s + 2 * s),
        }
    }

    pub fn validate(&self) -> Result<()> {
        const OP: &str = "ModelConfig";
        if !matches!(self.downsample, 1 | 2 | 4 | 8) {
            return Err(Error::invalid(OP, format!("downsample {} not in {{1, 2, 4, 8}}", self.downsample)));
        }
        if self.channels == 0 || self.cprime == 0 || self.cprime > self.channels {
            return Err(Error::invalid(OP, "need 0 < cprime <= channels"));
        }
        if self.context_channels < 2 {
            return Err(Error::invalid(OP, "context_channels must be at least 2"));
        }
        if self.motion_corr == 0 || self.motion_flow == 0 || self.motion_out <= 2 {
            return Err(Error::invalid(OP, "motion encoder widths must be positive (motion_out > 2)"));
        }
        if self.gru_levels != 1 {
            return Err(Error::invalid(
                OP,
                format!("gru_levels = {} is not supported; only single-level refinement exists", self.gru_levels),
            ));
        }
        if self.init_mode.is_cri() && !self.csc {
            return Err(Error::invalid(OP, format!("init mode {} needs the strip volumes (csc on)", self.init_mode)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enum_round_trip() {
        for m in InitMode::ALL {
            assert_eq!(m.as_str().parse::<InitMode>().unwrap(), *m);
        }
        assert!("bogus".parse::<AggregateMode>().is_err());
    }

    #[test]
    fn lookup_feature_count() {
        let mut cfg = ModelConfig {
            radius: 1,
            ..ModelConfig::default()
        };
        assert_eq!(cfg.lookup_features(), 72);
        cfg.csc = false;
        assert_eq!(cfg.lookup_features(), 36);
    }

    #[test]
    fn rejects_unsupported() {
        let cfg = ModelConfig {
            gru_levels: 3,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            csc: false,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }
}
