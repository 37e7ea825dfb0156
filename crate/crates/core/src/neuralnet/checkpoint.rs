//! Checkpoint container: a plain-text `key=value` header terminated by a
//! line `END`, followed by the parameter store as little-endian `f32` in
//! [`ParamLayout`](super::ParamLayout) order.

use std::path::Path;

use super::{Architecture, EpochRecord, Network};
use crate::error::{Error, Result};
use crate::keyvalue::KeyValues;

pub const CHECKPOINT_MAGIC: &str = "FLICKER-EWS-CHECKPOINT";
pub const CHECKPOINT_VERSION: u32 = 1;
const END_MARKER: &[u8] = b"\nEND\n";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network<f32>,
    /// Rolling-variance window used to assemble the training inputs.
    pub var_window: usize,
    /// Training configuration echo.
    pub config: KeyValues,
    pub history: Vec<EpochRecord>,
}

impl Checkpoint {
    pub fn new(network: Network<f32>, var_window: usize) -> Self {
        Checkpoint {
            network,
            var_window,
            config: KeyValues::new(),
            history: Vec::new(),
        }
    }

    pub fn native_length(&self) -> usize {
        self.network.architecture().input_len
    }

    fn header(&self) -> KeyValues {
        let a = self.network.architecture();
        let mut kv = KeyValues::new();
        kv.push("format_version", CHECKPOINT_VERSION)
            .push("artifact_version", crate::ARTIFACT_VERSION)
            .push(
                "architecture",
                "conv1d-relu,conv1d-relu,dropout,maxpool2,lstm-seq,dropout,lstm-last,dropout,dense-softmax",
            )
            .push("input_length", a.input_len)
            .push("in_channels", a.in_channels)
            .push("conv1_filters", a.conv1_filters)
            .push("conv2_filters", a.conv2_filters)
            .push("kernel", a.kernel)
            .push("lstm1_units", a.lstm1_units)
            .push("lstm2_units", a.lstm2_units)
            .push("classes", a.classes)
            .push("dropout", a.dropout)
            .push("var_window", self.var_window)
            .push("param_count", self.network.param_count());
        for (k, v) in self.config.iter() {
            kv.push(format!("config.{k}"), v);
        }
        kv.push("history_epochs", self.history.len());
        for r in &self.history {
            kv.push(
                format!("history.{}", r.epoch),
                format!(
                    "train_loss={};train_accuracy={};val_loss={};val_accuracy={}",
                    r.train_loss, r.train_accuracy, r.val_loss, r.val_accuracy
                ),
            );
        }
        kv.push("payload", "f32le");
        kv
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(self.header().render().as_bytes());
        out.extend_from_slice(&END_MARKER[1..]);
        for v in self.network.params() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |detail: String| Error::format("checkpoint", detail);
        let magic_len = CHECKPOINT_MAGIC.len() + 1;
        if bytes.len() < magic_len || &bytes[..magic_len - 1] != CHECKPOINT_MAGIC.as_bytes() {
            return Err(bad("missing magic line".into()));
        }
        let end = bytes
            .windows(END_MARKER.len())
            .position(|w| w == END_MARKER)
            .ok_or_else(|| bad("header has no END line".into()))?;
        let header_text = std::str::from_utf8(&bytes[magic_len..=end])
            .map_err(|_| bad("header is not UTF-8".into()))?;
        let kv = KeyValues::parse(header_text)?;
        let version: u32 = kv.parse_value("format_version")?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let arch = Architecture {
            input_len: kv.parse_value("input_length")?,
            in_channels: kv.parse_value("in_channels")?,
            conv1_filters: kv.parse_value("conv1_filters")?,
            conv2_filters: kv.parse_value("conv2_filters")?,
            kernel: kv.parse_value("kernel")?,
            lstm1_units: kv.parse_value("lstm1_units")?,
            lstm2_units: kv.parse_value("lstm2_units")?,
            classes: kv.parse_value("classes")?,
            dropout: kv.parse_value("dropout")?,
        };
        let count: usize = kv.parse_value("param_count")?;
        let payload = &bytes[end + END_MARKER.len()..];
        if payload.len() != 4 * count {
            return Err(bad(format!(
                "payload holds {} bytes, header promises {count} parameters",
                payload.len()
            )));
        }
        let params = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let network = Network::from_params(arch, params)?;

        let mut config = KeyValues::new();
        for (k, v) in kv.iter() {
            if let Some(name) = k.strip_prefix("config.") {
                config.push(name, v);
            }
        }
        let epochs: usize = kv.parse_value("history_epochs")?;
        let mut history = Vec::with_capacity(epochs);
        for (k, v) in kv.iter() {
            let Some(epoch) = k.strip_prefix("history.") else {
                continue;
            };
            let epoch: usize = epoch
                .parse()
                .map_err(|_| bad(format!("bad history key `{k}`")))?;
            let fields = KeyValues::parse(&v.replace(';', "\n"))?;
            history.push(EpochRecord {
                epoch,
                train_loss: fields.parse_value("train_loss")?,
                train_accuracy: fields.parse_value("train_accuracy")?,
                val_loss: fields.parse_value("val_loss")?,
                val_accuracy: fields.parse_value("val_accuracy")?,
            });
        }
        if history.len() != epochs {
            return Err(bad("history length mismatch".into()));
        }
        Ok(Checkpoint {
            network,
            var_window: kv.parse_value("var_window")?,
            config,
            history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let arch = Architecture {
            input_len: 40,
            in_channels: 2,
            conv1_filters: 3,
            conv2_filters: 5,
            kernel: 4,
            lstm1_units: 4,
            lstm2_units: 2,
            classes: 2,
            dropout: 0.05,
        };
        let mut ckpt = Checkpoint::new(Network::new(arch, 8).unwrap(), 8);
        ckpt.config.push("lr", 0.01).push("batch_size", 32);
        ckpt.history.push(EpochRecord {
            epoch: 1,
            train_loss: 0.7,
            train_accuracy: 0.5,
            val_loss: 0.61,
            val_accuracy: 2.0 / 3.0,
        });
        ckpt
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ckpt = sample();
        let bytes = ckpt.to_bytes();
        let loaded = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(loaded, ckpt);
        assert_eq!(loaded.to_bytes(), bytes);
    }

    #[test]
    fn loaded_model_predicts_identically() {
        let ckpt = sample();
        let loaded = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        let probe: Vec<f32> = (0..80).map(|i| (i as f32 * 0.3).sin()).collect();
        assert_eq!(
            ckpt.network.predict(&probe).unwrap(),
            loaded.network.predict(&probe).unwrap()
        );
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"garbage").is_err());
        let text = String::from_utf8_lossy(&bytes).replace("format_version=1", "format_version=9");
        assert!(Checkpoint::from_bytes(text.as_bytes()).is_err());
    }
}
