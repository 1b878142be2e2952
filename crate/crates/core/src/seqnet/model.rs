use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::lstm::{dropout_mask, gather_rows_sum, select_rows, LayerGrads, Linear, LstmLayer, StepCache};
use super::softmax::softmax_rows;
use crate::error::{Error, Result};
use crate::personalize::PersonalizationMethod;
use crate::trace::{DomainVocab, EncodedStep, Window, TIME_FEATURE_WIDTH};

/// Sequence length of every model input: `(x_{t-2}, x_{t-1})`.
pub const SEQ_LEN: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub input_width: usize,
    /// Hidden size of each stacked LSTM layer, bottom first.
    pub hidden_sizes: Vec<usize>,
    pub dropout: f64,
    pub output_size: usize,
    /// Also apply dropout to the top LSTM output (single-layer models have no
    /// between-layer site).
    #[serde(default)]
    pub output_dropout: bool,
}

impl ArchConfig {
    /// Stacked model with `n_layers` equal-width LSTM layers.
    pub fn stacked(input_width: usize, hidden: usize, n_layers: usize, output_size: usize) -> Self {
        ArchConfig {
            input_width,
            hidden_sizes: vec![hidden; n_layers],
            dropout: 0.1,
            output_size,
            output_dropout: false,
        }
    }

    /// Two 128-wide layers over `vocab`.
    pub fn general(vocab: &DomainVocab) -> Self {
        Self::stacked(vocab.encoded_width(), 128, 2, vocab.len())
    }

    pub fn n_locations(&self) -> usize {
        self.input_width - TIME_FEATURE_WIDTH
    }

    pub fn n_lstm_layers(&self) -> usize {
        self.hidden_sizes.len()
    }

    pub fn top_hidden(&self) -> usize {
        *self.hidden_sizes.last().expect("validated non-empty")
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_sizes.is_empty() || self.hidden_sizes.contains(&0) {
            return Err(Error::config("architecture needs at least one non-empty LSTM layer"));
        }
        if self.input_width <= TIME_FEATURE_WIDTH || self.output_size == 0 {
            return Err(Error::config("input and output widths must cover at least one location"));
        }
        if self.output_size != self.n_locations() {
            return Err(Error::config(format!(
                "output size {} does not match the {} locations in the input encoding",
                self.output_size,
                self.n_locations()
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    General,
    Personalized,
}

/// Trainable tensors; gradients share the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub lstm: Vec<LstmLayer>,
    pub head: Linear,
}

impl Params {
    pub fn zeros_like(&self) -> Self {
        Params {
            lstm: self
                .lstm
                .iter()
                .map(|l| LstmLayer::zeros(l.input_size(), l.hidden_size()))
                .collect(),
            head: Linear {
                weight: Array2::zeros(self.head.weight.raw_dim()),
                bias: Array1::zeros(self.head.bias.len()),
            },
        }
    }

    /// Tensors of layer `i` (LSTM layers first, head last) as flat slices.
    pub fn layer_slices(&self, i: usize) -> Vec<&[f64]> {
        let st = "standard layout";
        if i < self.lstm.len() {
            let l = &self.lstm[i];
            vec![
                l.w_ih.as_slice().expect(st),
                l.w_hh.as_slice().expect(st),
                l.bias.as_slice().expect(st),
            ]
        } else {
            vec![
                self.head.weight.as_slice().expect(st),
                self.head.bias.as_slice().expect(st),
            ]
        }
    }

    pub fn layer_slices_mut(&mut self, i: usize) -> Vec<&mut [f64]> {
        let st = "standard layout";
        if i < self.lstm.len() {
            let l = &mut self.lstm[i];
            vec![
                l.w_ih.as_slice_mut().expect(st),
                l.w_hh.as_slice_mut().expect(st),
                l.bias.as_slice_mut().expect(st),
            ]
        } else {
            vec![
                self.head.weight.as_slice_mut().expect(st),
                self.head.bias.as_slice_mut().expect(st),
            ]
        }
    }

    /// Number of layers including the head.
    pub fn n_layers(&self) -> usize {
        self.lstm.len() + 1
    }

    pub fn n_values(&self) -> usize {
        (0..self.n_layers())
            .map(|i| self.layer_slices(i).iter().map(|s| s.len()).sum::<usize>())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeqModel {
    pub arch: ArchConfig,
    pub params: Params,
    pub vocab_fingerprint: String,
    pub role: Role,
    pub method: Option<PersonalizationMethod>,
    /// Fingerprint of the general model a personalized model derives from.
    pub parent: Option<String>,
    pub temperature: f64,
}

/// Uniform init in `[-1/sqrt(h), 1/sqrt(h)]`, deterministic under `seed`.
pub fn init_model(arch: &ArchConfig, vocab: &DomainVocab, seed: u64) -> Result<SeqModel> {
    arch.validate()?;
    if arch.input_width != vocab.encoded_width() {
        return Err(Error::contract(format!(
            "architecture input width {} does not match vocabulary width {}",
            arch.input_width,
            vocab.encoded_width()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lstm = Vec::with_capacity(arch.hidden_sizes.len());
    let mut input = arch.input_width;
    for &h in &arch.hidden_sizes {
        lstm.push(LstmLayer::uniform(input, h, &mut rng));
        input = h;
    }
    let head = Linear::uniform(input, arch.output_size, &mut rng);
    Ok(SeqModel {
        arch: arch.clone(),
        params: Params { lstm, head },
        vocab_fingerprint: vocab.fingerprint(),
        role: Role::General,
        method: None,
        parent: None,
        temperature: 1.0,
    })
}

/// Dense encodings `[X_{t-2}, X_{t-1}]`, each `B x width`.
pub fn dense_inputs(windows: &[Window], n_locations: usize) -> [Array2<f64>; SEQ_LEN] {
    let width = n_locations + TIME_FEATURE_WIDTH;
    let mut x2 = Array2::zeros((windows.len(), width));
    let mut x1 = Array2::zeros((windows.len(), width));
    for (r, w) in windows.iter().enumerate() {
        for i in w.prev2.hot_indices(n_locations) {
            x2[[r, i]] = 1.0;
        }
        for i in w.prev1.hot_indices(n_locations) {
            x1[[r, i]] = 1.0;
        }
    }
    [x2, x1]
}

/// Per-layer caches of a training forward pass.
pub(crate) struct ForwardCache {
    steps: Vec<Vec<StepCache>>,
    /// Dropout mask applied to layer `l`'s output (`l` < top, or top with `output_dropout`).
    masks: Vec<Option<[Array2<f64>; SEQ_LEN]>>,
    top: Array2<f64>,
    pub logits: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Params,
    /// Gradients with respect to `[X_{t-2}, X_{t-1}]`, when requested.
    pub inputs: Option<[Array2<f64>; SEQ_LEN]>,
}

impl SeqModel {
    pub fn n_locations(&self) -> usize {
        self.arch.output_size
    }

    pub fn check_vocab(&self, vocab: &DomainVocab) -> Result<()> {
        let fp = vocab.fingerprint();
        if fp != self.vocab_fingerprint {
            return Err(Error::contract(format!(
                "model is bound to vocabulary {} but data uses {}",
                self.vocab_fingerprint, fp
            )));
        }
        Ok(())
    }

    /// Digest of architecture and parameters.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.arch).expect("arch serializes"));
        for i in 0..self.params.n_layers() {
            for s in self.params.layer_slices(i) {
                for v in s {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex::encode(&h.finalize()[..16])
    }

    /// Forward pass with caches.
    pub(crate) fn forward_cached(
        &self,
        inputs: [Array2<f64>; SEQ_LEN],
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> ForwardCache {
        let n_layers = self.params.lstm.len();
        let mut steps: Vec<Vec<StepCache>> = Vec::with_capacity(n_layers);
        let mut masks = Vec::with_capacity(n_layers);
        let mut xs: Vec<Array2<f64>> = inputs.into();
        for (l, layer) in self.params.lstm.iter().enumerate() {
            let mut layer_steps: Vec<StepCache> = Vec::with_capacity(SEQ_LEN);
            for x in xs.drain(..) {
                let proj = x.dot(&layer.w_ih);
                let prev = layer_steps.last();
                let cache = layer.step(x, proj, prev.map(|c| &c.h), prev.map(|c| &c.c));
                layer_steps.push(cache);
            }
            let apply_dropout = self.arch.dropout > 0.0
                && (l + 1 < n_layers || self.arch.output_dropout);
            let mask = match dropout_rng.as_deref_mut() {
                Some(rng) if apply_dropout => {
                    let b = layer_steps[0].h.nrows();
                    let h = layer.hidden_size();
                    Some([
                        dropout_mask(b, h, self.arch.dropout, rng),
                        dropout_mask(b, h, self.arch.dropout, rng),
                    ])
                }
                _ => None,
            };
            xs = layer_steps
                .iter()
                .enumerate()
                .map(|(t, c)| match &mask {
                    Some(m) => &c.h * &m[t],
                    None => c.h.clone(),
                })
                .collect();
            masks.push(mask);
            steps.push(layer_steps);
        }
        let top = xs.pop().expect("sequence length 2");
        let logits = self.params.head.forward(&top);
        ForwardCache {
            steps,
            masks,
            top,
            logits,
        }
    }

    /// Backprop from `dlogits`. Layers below `first_trainable` receive no
    /// parameter gradient (their slots stay zero) unless input gradients are needed.
    pub(crate) fn backward(
        &self,
        cache: &ForwardCache,
        dlogits: &Array2<f64>,
        first_trainable: usize,
        need_inputs: bool,
    ) -> Gradients {
        let mut grads = self.params.zeros_like();
        grads.head.weight = cache.top.t().dot(dlogits);
        grads.head.bias = dlogits.sum_axis(Axis(0));
        let n_layers = self.params.lstm.len();
        let lowest = if need_inputs { 0 } else { first_trainable };
        if lowest >= n_layers {
            return Gradients {
                params: grads,
                inputs: None,
            };
        }
        let b = dlogits.nrows();
        let top_h = self.arch.top_hidden();
        let mut d_top = dlogits.dot(&self.params.head.weight.t());
        if let Some(m) = &cache.masks[n_layers - 1] {
            d_top *= &m[SEQ_LEN - 1];
        }
        let mut dh: Vec<Array2<f64>> = vec![Array2::zeros((b, top_h)), d_top];
        let mut inputs = None;
        for l in (lowest..n_layers).rev() {
            let need_dx = l > lowest || need_inputs;
            let (LayerGrads { w_ih, w_hh, bias }, dx) =
                self.params.lstm[l].backward(&cache.steps[l], &dh, need_dx);
            grads.lstm[l] = LstmLayer { w_ih, w_hh, bias };
            let Some(mut dx) = dx else { break };
            if l == 0 {
                let x1 = dx.pop().expect("two steps");
                let x2 = dx.pop().expect("two steps");
                inputs = Some([x2, x1]);
                break;
            }
            if let Some(m) = &cache.masks[l - 1] {
                for (t, d) in dx.iter_mut().enumerate() {
                    *d *= &m[t];
                }
            }
            dh = dx;
        }
        Gradients {
            params: grads,
            inputs,
        }
    }

    /// Outputs of the bottom `n` LSTM layers at both steps, no dropout.
    pub(crate) fn prefix_features(&self, inputs: [Array2<f64>; SEQ_LEN], n: usize) -> [Array2<f64>; SEQ_LEN] {
        let [mut x2, mut x1] = inputs;
        for layer in &self.params.lstm[..n] {
            let p2 = x2.dot(&layer.w_ih);
            let s2 = layer.step(x2, p2, None, None);
            let p1 = x1.dot(&layer.w_ih);
            let s1 = layer.step(x1, p1, Some(&s2.h), Some(&s2.c));
            x2 = s2.h;
            x1 = s1.h;
        }
        [x2, x1]
    }

    /// The layers from LSTM layer `from` upward, taking that layer's input directly.
    pub(crate) fn suffix(&self, from: usize) -> SeqModel {
        let mut m = self.clone();
        m.arch.hidden_sizes = self.arch.hidden_sizes[from..].to_vec();
        m.params.lstm = self.params.lstm[from..].to_vec();
        m
    }

    /// Logits for dense (possibly non one-hot) inputs, no dropout.
    pub fn logits_dense(&self, inputs: [Array2<f64>; SEQ_LEN]) -> Array2<f64> {
        self.forward_cached(inputs, None).logits
    }

    /// Logits for one-hot encoded input pairs.
    ///
    /// The first step of every layer depends only on `x_{t-2}`, so it is
    /// evaluated once per distinct `x_{t-2}` in the batch.
    pub fn logits(&self, pairs: &[(EncodedStep, EncodedStep)]) -> Array2<f64> {
        let n_loc = self.n_locations();
        let mut keys: Vec<EncodedStep> = Vec::new();
        let mut key_index = std::collections::HashMap::new();
        let row_key: Vec<usize> = pairs
            .iter()
            .map(|(p2, _)| {
                *key_index.entry(*p2).or_insert_with(|| {
                    keys.push(*p2);
                    keys.len() - 1
                })
            })
            .collect();

        let first_rows: Vec<[usize; 4]> = keys.iter().map(|k| k.hot_indices(n_loc)).collect();
        let second_rows: Vec<[usize; 4]> = pairs.iter().map(|(_, p1)| p1.hot_indices(n_loc)).collect();

        let mut prev_h0: Option<Array2<f64>> = None;
        let mut prev_h1: Option<Array2<f64>> = None;
        for layer in &self.params.lstm {
            // Step t-2 over distinct keys.
            let mut g0 = match &prev_h0 {
                None => gather_rows_sum(&layer.w_ih, &first_rows),
                Some(h) => h.dot(&layer.w_ih),
            };
            g0 += &layer.bias;
            let (c0, _, h0) = layer.activate(&mut g0, None);
            let rec = select_rows(&h0.dot(&layer.w_hh), &row_key);
            let c0_rows = select_rows(&c0, &row_key);
            // Step t-1 over every row.
            let mut g1 = match &prev_h1 {
                None => gather_rows_sum(&layer.w_ih, &second_rows),
                Some(h) => h.dot(&layer.w_ih),
            };
            g1 += &rec;
            g1 += &layer.bias;
            let (_, _, h1) = layer.activate(&mut g1, Some(c0_rows.view()));
            prev_h0 = Some(h0);
            prev_h1 = Some(h1);
        }
        self.params
            .head
            .forward(&prev_h1.expect("at least one layer"))
    }

    /// Probabilities `softmax(z / temperature)` for each input pair.
    pub fn forward(
        &self,
        vocab: &DomainVocab,
        pairs: &[(EncodedStep, EncodedStep)],
        temperature: f64,
    ) -> Result<Array2<f64>> {
        self.check_vocab(vocab)?;
        if !(temperature > 0.0) {
            return Err(Error::config(format!("temperature {temperature} must be positive")));
        }
        Ok(softmax_rows(&self.logits(pairs), temperature))
    }

    /// Probabilities for windows at the model's own inference temperature.
    pub fn predict_windows(&self, windows: &[Window]) -> Array2<f64> {
        let pairs: Vec<_> = windows.iter().map(|w| (w.prev2, w.prev1)).collect();
        softmax_rows(&self.logits(&pairs), self.temperature)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::Scale;

    fn vocab(n: usize) -> DomainVocab {
        DomainVocab::from_locations(Scale::Building, (0..n).map(|i| format!("l{i}")))
    }

    #[test]
    fn init_is_seeded_and_shaped() {
        let v = vocab(5);
        let arch = ArchConfig::stacked(v.encoded_width(), 8, 2, 5);
        let a = init_model(&arch, &v, 1).unwrap();
        let b = init_model(&arch, &v, 1).unwrap();
        let c = init_model(&arch, &v, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params, c.params);
        assert_eq!(a.params.head.weight.dim(), (8, 5));
        let bound = 1.0 / 8f64.sqrt();
        assert!(a.params.lstm[0].w_ih.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn arch_validation() {
        let v = vocab(5);
        let mut arch = ArchConfig::stacked(v.encoded_width(), 8, 2, 5);
        arch.dropout = 1.0;
        assert!(init_model(&arch, &v, 0).is_err());
        let arch = ArchConfig::stacked(v.encoded_width(), 0, 2, 5);
        assert!(init_model(&arch, &v, 0).is_err());
        let arch = ArchConfig::stacked(vocab(6).encoded_width(), 8, 2, 6);
        assert!(matches!(init_model(&arch, &v, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn cached_and_dense_paths_agree() {
        let v = vocab(5);
        let arch = ArchConfig::stacked(v.encoded_width(), 8, 3, 5);
        let m = init_model(&arch, &v, 9).unwrap();
        let step = |l, s, d, w| EncodedStep { location: l, slot: s, duration_bin: d, day: w };
        let windows: Vec<Window> = (0..12)
            .map(|i| Window {
                prev2: step(i % 2, 20, 3, 1),
                prev1: step(i % 5, (i * 7) % 48, i % 24, i % 7),
                label: 0,
                time: 0,
            })
            .collect();
        let pairs: Vec<_> = windows.iter().map(|w| (w.prev2, w.prev1)).collect();
        let fast = m.logits(&pairs);
        let dense = m.logits_dense(dense_inputs(&windows, 5));
        for (a, b) in fast.iter().zip(dense.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn forward_rejects_foreign_vocab_and_bad_temperature() {
        let v = vocab(5);
        let arch = ArchConfig::stacked(v.encoded_width(), 4, 1, 5);
        let m = init_model(&arch, &v, 0).unwrap();
        let other = DomainVocab::from_locations(Scale::Building, (0..5).map(|i| format!("x{i}")));
        let s = EncodedStep { location: 0, slot: 0, duration_bin: 0, day: 0 };
        assert!(matches!(m.forward(&other, &[(s, s)], 1.0), Err(Error::Contract(_))));
        assert!(m.forward(&v, &[(s, s)], 0.0).is_err());
        let p = m.forward(&v, &[(s, s)], 1.0).unwrap();
        assert!((p.sum() - 1.0).abs() < 1e-12);
    }
}
