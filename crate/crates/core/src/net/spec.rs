use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    FullyConnected,
    Output,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    /// time × frequency; `(1, 1)` for fully connected layers
    pub filter: (usize, usize),
    pub out_channels: usize,
    /// time × frequency
    pub pool: (usize, usize),
    pub dropout_keep: f64,
}

impl LayerSpec {
    fn conv(name: &str, ch: usize, filter: (usize, usize), pool: (usize, usize)) -> Self {
        Self {
            name: name.to_string(),
            kind: LayerKind::Conv,
            filter,
            out_channels: ch,
            pool,
            dropout_keep: 0.75,
        }
    }

    fn fc(name: &str, units: usize) -> Self {
        Self {
            name: name.to_string(),
            kind: LayerKind::FullyConnected,
            filter: (1, 1),
            out_channels: units,
            pool: (1, 1),
            dropout_keep: 0.9,
        }
    }

    fn output(vocab: usize) -> Self {
        Self {
            name: "CTC".to_string(),
            kind: LayerKind::Output,
            filter: (1, 1),
            out_channels: vocab,
            pool: (1, 1),
            dropout_keep: 1.0,
        }
    }
}

/// Activation extents `(T', F', D)` after a layer's pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub time: usize,
    pub freq: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    /// filterbank channels of the `T × F × 3` input
    pub input_freq: usize,
    pub input_channels: usize,
    /// output symbols including blank at index 0
    pub vocab_size: usize,
}

impl NetworkSpec {
    /// The 13-layer recognition network: C0–C9, FC0–FC1 and the CTC head.
    pub fn paper(vocab_size: usize) -> Self {
        let mut layers = vec![
            LayerSpec::conv("C0", 128, (5, 5), (2, 2)),
            LayerSpec::conv("C1", 128, (5, 5), (1, 2)),
            LayerSpec::conv("C2", 128, (5, 3), (1, 1)),
            LayerSpec::conv("C3", 256, (5, 3), (1, 2)),
        ];
        for i in 4..10 {
            layers.push(LayerSpec::conv(&format!("C{i}"), 256, (5, 3), (1, 1)));
        }
        layers.push(LayerSpec::fc("FC0", 1024));
        layers.push(LayerSpec::fc("FC1", 1024));
        layers.push(LayerSpec::output(vocab_size));
        Self {
            layers,
            input_freq: 80,
            input_channels: 3,
            vocab_size,
        }
    }

    /// Desk-scale network with the same pooling pattern: C0–C5, FC0, CTC on
    /// a 20-channel input.
    pub fn toy(num_chars: usize) -> Self {
        let vocab_size = num_chars + 1;
        Self {
            layers: vec![
                LayerSpec::conv("C0", 8, (5, 5), (2, 2)),
                LayerSpec::conv("C1", 8, (5, 5), (1, 2)),
                LayerSpec::conv("C2", 8, (5, 3), (1, 1)),
                LayerSpec::conv("C3", 16, (5, 3), (1, 2)),
                LayerSpec::conv("C4", 16, (5, 3), (1, 1)),
                LayerSpec::conv("C5", 16, (5, 3), (1, 1)),
                LayerSpec::fc("FC0", 32),
                LayerSpec::output(vocab_size),
            ],
            input_freq: 20,
            input_channels: 3,
            vocab_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        let mut seen = std::collections::HashSet::new();
        let mut after_fc = false;
        for (i, l) in self.layers.iter().enumerate() {
            if !seen.insert(l.name.as_str()) {
                return bad(format!("duplicate layer name {}", l.name));
            }
            if l.filter.0 % 2 == 0 || l.filter.1 % 2 == 0 {
                return bad(format!("layer {} has even filter {:?}", l.name, l.filter));
            }
            if l.pool.0 == 0 || l.pool.1 == 0 || l.out_channels == 0 {
                return bad(format!("layer {} has zero pool or width", l.name));
            }
            if !(l.dropout_keep > 0.0 && l.dropout_keep <= 1.0) {
                return bad(format!("layer {} keep probability {}", l.name, l.dropout_keep));
            }
            match l.kind {
                LayerKind::Conv if after_fc => {
                    return bad(format!("conv layer {} after a fully connected layer", l.name))
                }
                LayerKind::Conv => {}
                LayerKind::FullyConnected => after_fc = true,
                LayerKind::Output => {
                    if i + 1 != self.layers.len() || l.out_channels != self.vocab_size {
                        return bad("output layer must be last and match the vocabulary".into());
                    }
                }
            }
        }
        if self.input_freq == 0 || self.input_channels == 0 || self.vocab_size < 2 {
            return bad("input extents and vocabulary must be positive".into());
        }
        Ok(())
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn layer_names(&self) -> Vec<&str> {
        self.layers.iter().map(|l| l.name.as_str()).collect()
    }

    /// Activation extents of every layer for an input of `frames` frames.
    /// Fails when pooling would empty an axis.
    pub fn layer_shapes(&self, frames: usize) -> Result<Vec<LayerShape>> {
        let mut cur = LayerShape {
            time: frames,
            freq: self.input_freq,
            channels: self.input_channels,
        };
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            cur = match l.kind {
                LayerKind::Conv => LayerShape {
                    time: cur.time / l.pool.0,
                    freq: cur.freq / l.pool.1,
                    channels: l.out_channels,
                },
                _ => LayerShape {
                    time: cur.time,
                    freq: 1,
                    channels: l.out_channels,
                },
            };
            if cur.time == 0 || cur.freq == 0 {
                return Err(Error::InvalidArgument(format!(
                    "{frames} input frames are too few for the pooling at layer {}",
                    l.name
                )));
            }
            out.push(cur);
        }
        Ok(out)
    }

    /// Fan-in of each layer's kernel: `(rows, cols)` of its weight matrix view.
    pub fn kernel_shapes(&self) -> Vec<Vec<usize>> {
        let mut freq = self.input_freq;
        let mut ch = self.input_channels;
        let mut flat = 0;
        let mut out = Vec::new();
        for l in &self.layers {
            match l.kind {
                LayerKind::Conv => {
                    out.push(vec![l.filter.0, l.filter.1, ch, l.out_channels]);
                    freq /= l.pool.1;
                    ch = l.out_channels;
                    flat = freq * ch;
                }
                _ => {
                    let input = if flat == 0 { freq * ch } else { flat };
                    out.push(vec![input, l.out_channels]);
                    flat = l.out_channels;
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_spec_layers() {
        let s = NetworkSpec::paper(30);
        s.validate().unwrap();
        assert_eq!(s.layers.len(), 13);
        let c0 = &s.layers[0];
        assert_eq!((c0.out_channels, c0.filter, c0.pool), (128, (5, 5), (2, 2)));
        assert_eq!(s.layers[1].pool, (1, 2));
        assert_eq!((s.layers[2].filter, s.layers[2].pool), ((5, 3), (1, 1)));
        assert_eq!((s.layers[3].out_channels, s.layers[3].pool), (256, (1, 2)));
        assert!(s.layers[4..10]
            .iter()
            .all(|l| l.out_channels == 256 && l.filter == (5, 3)));
        assert_eq!(s.layers[10].out_channels, 1024);
        assert_eq!(s.layers[11].out_channels, 1024);
        assert_eq!(s.layers[12].kind, LayerKind::Output);
        assert!(s.layers[..10].iter().all(|l| l.dropout_keep == 0.75));
        assert!(s.layers[10..12].iter().all(|l| l.dropout_keep == 0.9));
    }

    #[test]
    fn paper_pooling_schedule() {
        let shapes = NetworkSpec::paper(30).layer_shapes(98).unwrap();
        assert_eq!(
            shapes[0],
            LayerShape {
                time: 49,
                freq: 40,
                channels: 128
            }
        );
        assert_eq!(shapes[1].freq, 20);
        assert_eq!(shapes[3].freq, 10);
        assert_eq!(
            shapes[9],
            LayerShape {
                time: 49,
                freq: 10,
                channels: 256
            }
        );
        assert_eq!(
            shapes[10],
            LayerShape {
                time: 49,
                freq: 1,
                channels: 1024
            }
        );
    }

    #[test]
    fn toy_spec_layers() {
        let s = NetworkSpec::toy(4);
        s.validate().unwrap();
        assert_eq!(s.layers.len(), 8);
        let shapes = s.layer_shapes(20).unwrap();
        let freqs: Vec<usize> = shapes[..4].iter().map(|l| l.freq).collect();
        assert_eq!(freqs, vec![10, 5, 5, 2]);
        assert_eq!(
            shapes[1],
            LayerShape {
                time: 10,
                freq: 5,
                channels: 8
            }
        );
        assert_eq!(s.kernel_shapes()[6], vec![32, 32]);
        assert_eq!(s.kernel_shapes()[7], vec![32, 5]);
    }

    #[test]
    fn too_short_input_rejected() {
        assert!(NetworkSpec::toy(4).layer_shapes(1).is_err());
    }

    #[test]
    fn unknown_layer() {
        assert!(matches!(
            NetworkSpec::toy(4).layer_index("C9"),
            Err(Error::UnknownLayer(_))
        ));
    }
}
