use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Named dilation schedules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// 1, 1, 2, 3, 5, 8, …
    Fibonacci,
    /// 1, 1, 2, 4, 8, …
    Exponential,
    /// Every layer undilated.
    Ones,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DilationSchedule {
    Named(ScheduleKind),
    Explicit(Vec<usize>),
}

impl DilationSchedule {
    pub fn rates(&self, layers: usize) -> Vec<usize> {
        match self {
            DilationSchedule::Explicit(v) => v.clone(),
            DilationSchedule::Named(ScheduleKind::Ones) => vec![1; layers],
            DilationSchedule::Named(ScheduleKind::Fibonacci) => {
                let (mut a, mut b) = (1usize, 1usize);
                (0..layers)
                    .map(|_| {
                        let r = a;
                        (a, b) = (b, a + b);
                        r
                    })
                    .collect()
            }
            DilationSchedule::Named(ScheduleKind::Exponential) => (0..layers)
                .map(|i| if i == 0 { 1 } else { 1 << (i - 1) })
                .collect(),
        }
    }
}

/// Normalization used inside every conv block (and on the network input).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// `relu(a + IN(a))`.
    InstanceNormSkip,
    /// `relu(IN(a))`.
    InstanceNorm,
    /// `relu(a)`.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub kernels_per_layer: usize,
    pub dilation_schedule: DilationSchedule,
    pub num_dilated_layers: usize,
    pub concat_enabled: bool,
    pub norm_mode: NormMode,
    pub head_widths: Vec<usize>,
    pub num_classes: usize,
    pub dropout_rate: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            kernels_per_layer: 32,
            dilation_schedule: DilationSchedule::Named(ScheduleKind::Fibonacci),
            num_dilated_layers: 10,
            concat_enabled: true,
            norm_mode: NormMode::InstanceNormSkip,
            head_widths: vec![128, 32],
            num_classes: 6,
            dropout_rate: 0.5,
        }
    }
}

impl NetworkConfig {
    pub fn dilations(&self) -> Vec<usize> {
        self.dilation_schedule.rates(self.num_dilated_layers)
    }

    /// Channel count entering the first head layer.
    pub fn head_input_channels(&self) -> usize {
        if self.concat_enabled {
            1 + self.num_dilated_layers * self.kernels_per_layer
        } else {
            self.kernels_per_layer
        }
    }

    pub fn conv_layer_count(&self) -> usize {
        self.num_dilated_layers + self.head_widths.len() + 1
    }

    /// Checks every invariant and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.kernels_per_layer == 0 {
            bad.push("kernels_per_layer must be positive".to_string());
        }
        if self.num_dilated_layers == 0 {
            bad.push("num_dilated_layers must be positive".to_string());
        }
        let rates = self.dilations();
        if rates.len() != self.num_dilated_layers {
            bad.push(format!(
                "dilation schedule has {} rates for {} dilated layers",
                rates.len(),
                self.num_dilated_layers
            ));
        }
        if rates.contains(&0) {
            bad.push("dilation rates must be at least 1".to_string());
        }
        if self.num_classes < 2 {
            bad.push(format!("num_classes {} < 2", self.num_classes));
        }
        if self.num_classes > 255 {
            bad.push(format!("num_classes {} exceeds the u8 label range", self.num_classes));
        }
        if self.head_widths.contains(&0) {
            bad.push("head widths must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            bad.push(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(bad))
        }
    }
}

/// One row of the architecture ablation grid.
#[derive(Debug, Clone)]
pub struct Ablation {
    pub name: &'static str,
    pub config: NetworkConfig,
    /// Unsupervised loss scale used with this row.
    pub alpha: f64,
    /// Published parameter count, in units of 10^5.
    pub published_params_e5: f64,
}

/// The ablation grid: the proposed network and its one-change variants.
pub fn ablation_grid() -> Vec<Ablation> {
    let base = NetworkConfig::default();
    let row = |name, published_params_e5, alpha, f: &dyn Fn(&mut NetworkConfig)| {
        let mut config = base.clone();
        f(&mut config);
        Ablation {
            name,
            config,
            alpha,
            published_params_e5,
        }
    };
    vec![
        row("w/o dilated convolutions", 1.30, 0.1, &|c| {
            c.dilation_schedule = DilationSchedule::Named(ScheduleKind::Ones)
        }),
        row("w/o concatenation", 0.93, 0.1, &|c| c.concat_enabled = false),
        row("w/o InstanceNorm", 1.29, 0.1, &|c| c.norm_mode = NormMode::None),
        row("w/o InstanceNorm skip", 1.30, 0.1, &|c| {
            c.norm_mode = NormMode::InstanceNorm
        }),
        row("16 kernels/layer", 0.47, 0.1, &|c| c.kernels_per_layer = 16),
        row("Exponential dilation", 1.03, 0.1, &|c| {
            c.dilation_schedule = DilationSchedule::Named(ScheduleKind::Exponential);
            c.num_dilated_layers = 8;
        }),
        row("Purely supervised", 1.30, 0.0, &|_| {}),
        row("9 dilated layers", 1.18, 0.1, &|c| c.num_dilated_layers = 9),
        row("Proposed", 1.30, 0.1, &|_| {}),
        row("64 kernels/layer", 4.23, 0.1, &|c| c.kernels_per_layer = 64),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedules() {
        let fib = DilationSchedule::Named(ScheduleKind::Fibonacci);
        assert_eq!(fib.rates(10), vec![1, 1, 2, 3, 5, 8, 13, 21, 34, 55]);
        assert_eq!(fib.rates(9), vec![1, 1, 2, 3, 5, 8, 13, 21, 34]);
        let exp = DilationSchedule::Named(ScheduleKind::Exponential);
        assert_eq!(exp.rates(8), vec![1, 1, 2, 4, 8, 16, 32, 64]);
    }

    #[test]
    fn default_channel_arithmetic() {
        let c = NetworkConfig::default();
        assert_eq!(c.head_input_channels(), 321);
        assert_eq!(c.conv_layer_count(), 13);
        let mut nine = c.clone();
        nine.num_dilated_layers = 9;
        assert_eq!(nine.conv_layer_count(), 12);
    }

    #[test]
    fn validation_lists_every_violation() {
        let c = NetworkConfig {
            dilation_schedule: DilationSchedule::Explicit(vec![1, 2, 0]),
            num_classes: 1,
            ..NetworkConfig::default()
        };
        match c.validate() {
            Err(Error::InvalidConfig(v)) => assert_eq!(v.len(), 3, "{v:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn json_accepts_named_and_explicit_schedules() {
        let c: NetworkConfig =
            serde_json::from_str(r#"{"dilation_schedule": [1, 2], "num_dilated_layers": 2}"#)
                .unwrap();
        assert_eq!(c.dilations(), vec![1, 2]);
        let c: NetworkConfig =
            serde_json::from_str(r#"{"dilation_schedule": "exponential"}"#).unwrap();
        assert_eq!(c.dilations()[9], 256);
        assert!(serde_json::from_str::<NetworkConfig>(r#"{"kernels": 3}"#).is_err());
    }
}
