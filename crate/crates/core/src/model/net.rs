//! Parameter registration and forward graphs for the encoder-decoder.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::{ModelError, Result};
use crate::autodiff::{Graph, NodeId, ParamStore, Tensor};
use crate::rng::stream;

/// Hook applied to the subsampling output before the encoder stack; this is
/// where speaker/environment transforms attach.
pub type TransformHook<'a> = &'a mut dyn FnMut(&mut Graph, NodeId) -> crate::autodiff::Result<NodeId>;

const SUB_KERNEL: usize = 3;
const SUB_STRIDE: usize = 2;
/// Two kernel-3 stride-2 layers without padding need at least 7 positions.
const SUB_MIN: usize = 7;

pub struct Conformer {
    pub cfg: ModelConfig,
}

fn conv_out(len: usize) -> usize {
    (len - SUB_KERNEL) / SUB_STRIDE + 1
}

impl Conformer {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Conformer { cfg })
    }

    /// Output length of the subsampling stack: each layer maps
    /// `t -> floor((t - 3) / 2) + 1`, so e.g. 16 -> 7 -> 3.
    pub fn subsampled_len(&self, frames: usize) -> Result<usize> {
        if frames < SUB_MIN {
            return Err(ModelError::InputTooShort { got: frames, min: SUB_MIN });
        }
        Ok(conv_out(conv_out(frames)))
    }

    pub fn min_input_frames(&self) -> usize {
        SUB_MIN
    }

    fn sub_freq(&self) -> usize {
        conv_out(conv_out(self.cfg.feature_dim))
    }

    // ── parameter registration ──────────────────────────────────────

    pub fn init_params(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        let mut rng = stream(seed, "model/init");
        let d = self.cfg.model_dim;
        let c = self.cfg.subsample_channels;
        let ff = self.cfg.ff_dim;
        let v = self.cfg.vocab.size();
        let k = self.cfg.conv_kernel;

        self.conv_init(store, &mut rng, "model/sub/conv1", 1, c)?;
        self.conv_init(store, &mut rng, "model/sub/conv2", c, c)?;
        self.linear_init(store, &mut rng, "model/sub/proj", c * self.sub_freq(), d)?;

        for i in 0..self.cfg.encoder_blocks {
            let p = format!("model/enc{i}");
            self.ln_init(store, &format!("{p}/ff1/ln"), d)?;
            self.linear_init(store, &mut rng, &format!("{p}/ff1/in"), d, ff)?;
            self.linear_init(store, &mut rng, &format!("{p}/ff1/out"), ff, d)?;
            self.ln_init(store, &format!("{p}/att/ln"), d)?;
            for name in ["wq", "wk", "wv", "wo"] {
                self.linear_init(store, &mut rng, &format!("{p}/att/{name}"), d, d)?;
            }
            self.ln_init(store, &format!("{p}/conv/ln"), d)?;
            self.linear_init(store, &mut rng, &format!("{p}/conv/pw1"), d, 2 * d)?;
            self.dw_init(store, &mut rng, &format!("{p}/conv/dw"), d, k)?;
            self.linear_init(store, &mut rng, &format!("{p}/conv/pw2"), d, d)?;
            self.ln_init(store, &format!("{p}/ff2/ln"), d)?;
            self.linear_init(store, &mut rng, &format!("{p}/ff2/in"), d, ff)?;
            self.linear_init(store, &mut rng, &format!("{p}/ff2/out"), ff, d)?;
        }
        self.ln_init(store, "model/enc/final_ln", d)?;
        self.linear_init(store, &mut rng, "model/ctc/out", d, v)?;

        self.matrix_init(store, &mut rng, "model/dec/embed", v, d)?;
        for i in 0..self.cfg.decoder_blocks {
            let p = format!("model/dec{i}");
            self.ln_init(store, &format!("{p}/self/ln"), d)?;
            for name in ["wq", "wk", "wv", "wo"] {
                self.linear_init(store, &mut rng, &format!("{p}/self/{name}"), d, d)?;
            }
            self.ln_init(store, &format!("{p}/cross/ln"), d)?;
            for name in ["wq", "wk", "wv", "wo"] {
                self.linear_init(store, &mut rng, &format!("{p}/cross/{name}"), d, d)?;
            }
            self.ln_init(store, &format!("{p}/ff/ln"), d)?;
            self.linear_init(store, &mut rng, &format!("{p}/ff/in"), d, ff)?;
            self.linear_init(store, &mut rng, &format!("{p}/ff/out"), ff, d)?;
        }
        self.ln_init(store, "model/dec/final_ln", d)?;
        self.linear_init(store, &mut rng, "model/dec/out", d, v)?;
        Ok(())
    }

    fn xavier(&self, rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, n: usize) -> Vec<f64> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        (0..n).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * bound).collect()
    }

    fn linear_init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, din: usize, dout: usize) -> Result<()> {
        let w = Tensor::matrix(din, dout, self.xavier(rng, din, dout, din * dout))?;
        store.register(&format!("{prefix}/w"), w, true)?;
        store.register(&format!("{prefix}/b"), Tensor::zeros(vec![dout]), true)?;
        Ok(())
    }

    fn matrix_init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng, id: &str, rows: usize, cols: usize) -> Result<()> {
        let w = Tensor::matrix(rows, cols, self.xavier(rng, rows, cols, rows * cols))?;
        store.register(id, w, true)?;
        Ok(())
    }

    fn conv_init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, cin: usize, cout: usize) -> Result<()> {
        let n = cout * cin * SUB_KERNEL * SUB_KERNEL;
        let fan = cin * SUB_KERNEL * SUB_KERNEL;
        let w = Tensor::new(vec![cout, cin, SUB_KERNEL, SUB_KERNEL], self.xavier(rng, fan, cout * SUB_KERNEL * SUB_KERNEL, n))?;
        store.register(&format!("{prefix}/w"), w, true)?;
        store.register(&format!("{prefix}/b"), Tensor::zeros(vec![cout]), true)?;
        Ok(())
    }

    fn dw_init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize, k: usize) -> Result<()> {
        let w = Tensor::matrix(d, k, self.xavier(rng, k, k, d * k))?;
        store.register(&format!("{prefix}/w"), w, true)?;
        store.register(&format!("{prefix}/b"), Tensor::zeros(vec![d]), true)?;
        Ok(())
    }

    fn ln_init(&self, store: &mut ParamStore, prefix: &str, d: usize) -> Result<()> {
        store.register(&format!("{prefix}/g"), Tensor::full(vec![d], 1.0), true)?;
        store.register(&format!("{prefix}/b"), Tensor::zeros(vec![d]), true)?;
        Ok(())
    }

    // ── forward building blocks ─────────────────────────────────────

    fn linear(&self, g: &mut Graph, store: &ParamStore, x: NodeId, prefix: &str) -> Result<NodeId> {
        let w = g.param(store, &format!("{prefix}/w"))?;
        let b = g.param(store, &format!("{prefix}/b"))?;
        let y = g.matmul(x, w)?;
        Ok(g.add_row(y, b)?)
    }

    fn layer_norm(&self, g: &mut Graph, store: &ParamStore, x: NodeId, prefix: &str) -> Result<NodeId> {
        let gain = g.param(store, &format!("{prefix}/g"))?;
        let bias = g.param(store, &format!("{prefix}/b"))?;
        Ok(g.layer_norm(x, gain, bias, 1e-6)?)
    }

    fn ffn(&self, g: &mut Graph, store: &ParamStore, x: NodeId, prefix: &str) -> Result<NodeId> {
        let h = self.linear(g, store, x, &format!("{prefix}/in"))?;
        let h = g.swish(h)?;
        let h = g.dropout(h, self.cfg.dropout)?;
        let h = self.linear(g, store, h, &format!("{prefix}/out"))?;
        Ok(g.dropout(h, self.cfg.dropout)?)
    }

    /// Multi-head attention: query rows from `xq`, keys/values from `xkv`.
    fn mha(&self, g: &mut Graph, store: &ParamStore, xq: NodeId, xkv: NodeId, prefix: &str, mask: Option<NodeId>) -> Result<NodeId> {
        let q = self.linear(g, store, xq, &format!("{prefix}/wq"))?;
        let k = self.linear(g, store, xkv, &format!("{prefix}/wk"))?;
        let v = self.linear(g, store, xkv, &format!("{prefix}/wv"))?;
        let dh = self.cfg.model_dim / self.cfg.heads;
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let (from, to) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(q, from, to)?;
            let kh = g.slice_cols(k, from, to)?;
            let vh = g.slice_cols(v, from, to)?;
            heads.push(g.attention(qh, kh, vh, mask)?);
        }
        let cat = g.concat_cols(&heads)?;
        self.linear(g, store, cat, &format!("{prefix}/wo"))
    }

    fn conv_module(&self, g: &mut Graph, store: &ParamStore, x: NodeId, prefix: &str) -> Result<NodeId> {
        let d = self.cfg.model_dim;
        let h = self.linear(g, store, x, &format!("{prefix}/pw1"))?;
        // GLU gate
        let a = g.slice_cols(h, 0, d)?;
        let b = g.slice_cols(h, d, 2 * d)?;
        let gate = g.sigmoid(b)?;
        let h = g.mul(a, gate)?;
        let w = g.param(store, &format!("{prefix}/dw/w"))?;
        let bias = g.param(store, &format!("{prefix}/dw/b"))?;
        let h = g.depthwise_conv1d(h, w, bias)?;
        let h = g.swish(h)?;
        let h = self.linear(g, store, h, &format!("{prefix}/pw2"))?;
        Ok(g.dropout(h, self.cfg.dropout)?)
    }

    fn encoder_block(&self, g: &mut Graph, store: &ParamStore, x: NodeId, i: usize) -> Result<NodeId> {
        let p = format!("model/enc{i}");
        // macaron half-scale feed-forward
        let t = self.layer_norm(g, store, x, &format!("{p}/ff1/ln"))?;
        let t = self.ffn(g, store, t, &format!("{p}/ff1"))?;
        let t = g.scale(t, 0.5)?;
        let x = g.add(x, t)?;

        let t = self.layer_norm(g, store, x, &format!("{p}/att/ln"))?;
        let t = self.mha(g, store, t, t, &format!("{p}/att"), None)?;
        let t = g.dropout(t, self.cfg.dropout)?;
        let x = g.add(x, t)?;

        let t = self.layer_norm(g, store, x, &format!("{p}/conv/ln"))?;
        let t = self.conv_module(g, store, t, &format!("{p}/conv"))?;
        let x = g.add(x, t)?;

        let t = self.layer_norm(g, store, x, &format!("{p}/ff2/ln"))?;
        let t = self.ffn(g, store, t, &format!("{p}/ff2"))?;
        let t = g.scale(t, 0.5)?;
        Ok(g.add(x, t)?)
    }

    /// Sinusoidal positional encoding rows.
    fn posenc(len: usize, d: usize) -> Tensor {
        let mut data = vec![0.0; len * d];
        for t in 0..len {
            for i in 0..d / 2 {
                let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
                data[t * d + 2 * i] = (t as f64 * rate).sin();
                data[t * d + 2 * i + 1] = (t as f64 * rate).cos();
            }
        }
        Tensor::matrix(len, d, data).expect("posenc shape")
    }

    /// Convolution subsampling: (T,F) features to (T',D) hidden rows. This
    /// output is the transform insertion point.
    pub fn subsample(&self, g: &mut Graph, store: &ParamStore, feats: &Tensor) -> Result<NodeId> {
        let shape = feats.shape().to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.feature_dim {
            return Err(ModelError::BadConfig(format!("expected (T,{}) features, got {shape:?}", self.cfg.feature_dim)));
        }
        let t_in = shape[0];
        self.subsampled_len(t_in)?;
        let x = g.constant(feats.clone());
        let img = g.reshape(x, vec![1, t_in, self.cfg.feature_dim])?;

        let w1 = g.param(store, "model/sub/conv1/w")?;
        let b1 = g.param(store, "model/sub/conv1/b")?;
        let h = g.conv2d(img, w1, b1, SUB_STRIDE)?;
        let h = g.swish(h)?;
        let w2 = g.param(store, "model/sub/conv2/w")?;
        let b2 = g.param(store, "model/sub/conv2/b")?;
        let h = g.conv2d(h, w2, b2, SUB_STRIDE)?;
        let h = g.swish(h)?;

        // (C, T', F') -> (T', F'*C)
        let c = self.cfg.subsample_channels;
        let t_out = conv_out(conv_out(t_in));
        let f_out = self.sub_freq();
        let h = g.reshape(h, vec![c, t_out * f_out])?;
        let h = g.transpose(h)?;
        let h = g.reshape(h, vec![t_out, f_out * c])?;
        self.linear(g, store, h, "model/sub/proj")
    }

    /// Positional encoding, input dropout and the encoder block stack.
    pub fn encoder_stack(&self, g: &mut Graph, store: &ParamStore, h: NodeId) -> Result<NodeId> {
        let t_len = g.value(h).shape()[0];
        let pe = g.constant(Self::posenc(t_len, self.cfg.model_dim));
        let mut x = g.add(h, pe)?;
        x = g.dropout(x, self.cfg.dropout)?;
        for i in 0..self.cfg.encoder_blocks {
            x = self.encoder_block(g, store, x, i)?;
        }
        self.layer_norm(g, store, x, "model/enc/final_ln")
    }

    /// Full encoder: subsampling, optional transform at the insertion point,
    /// then the block stack. With no transform this is the baseline forward.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, feats: &Tensor, transform: Option<TransformHook>) -> Result<NodeId> {
        let mut h = self.subsample(g, store, feats)?;
        if let Some(hook) = transform {
            h = hook(g, h)?;
        }
        self.encoder_stack(g, store, h)
    }

    /// Frame-level log-probabilities for the CTC branch: (T', V).
    pub fn ctc_log_probs(&self, g: &mut Graph, store: &ParamStore, enc: NodeId) -> Result<NodeId> {
        let logits = self.linear(g, store, enc, "model/ctc/out")?;
        Ok(g.log_softmax(logits)?)
    }

    /// Teacher-forced decoder logits (len(input), V) for input token ids
    /// (sos-framed prefix).
    pub fn decoder_logits(&self, g: &mut Graph, store: &ParamStore, enc: NodeId, input_ids: &[u32]) -> Result<NodeId> {
        let d = self.cfg.model_dim;
        let len = input_ids.len();
        for &id in input_ids {
            if id as usize >= self.cfg.vocab.size() {
                return Err(ModelError::TokenOutsideVocab(id));
            }
        }
        let table = g.param(store, "model/dec/embed")?;
        let idx: Vec<usize> = input_ids.iter().map(|&i| i as usize).collect();
        let emb = g.gather(table, &idx)?;
        let emb = g.scale(emb, (d as f64).sqrt())?;
        let pe = g.constant(Self::posenc(len, d));
        let mut x = g.add(emb, pe)?;
        x = g.dropout(x, self.cfg.dropout)?;

        let causal = {
            let mut m = vec![0.0; len * len];
            for i in 0..len {
                for j in i + 1..len {
                    m[i * len + j] = -1e30;
                }
            }
            g.constant(Tensor::matrix(len, len, m)?)
        };

        for i in 0..self.cfg.decoder_blocks {
            let p = format!("model/dec{i}");
            let t = self.layer_norm(g, store, x, &format!("{p}/self/ln"))?;
            let t = self.mha(g, store, t, t, &format!("{p}/self"), Some(causal))?;
            let t = g.dropout(t, self.cfg.dropout)?;
            x = g.add(x, t)?;

            let t = self.layer_norm(g, store, x, &format!("{p}/cross/ln"))?;
            let t = self.mha(g, store, t, enc, &format!("{p}/cross"), None)?;
            let t = g.dropout(t, self.cfg.dropout)?;
            x = g.add(x, t)?;

            let t = self.layer_norm(g, store, x, &format!("{p}/ff/ln"))?;
            let t = self.ffn(g, store, t, &format!("{p}/ff"))?;
            x = g.add(x, t)?;
        }
        let x = self.layer_norm(g, store, x, "model/dec/final_ln")?;
        self.linear(g, store, x, "model/dec/out")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::GraphMode;
    use crate::model::vocab::Vocab;

    fn tiny() -> (Conformer, ParamStore) {
        let cfg = ModelConfig {
            feature_dim: 12,
            encoder_blocks: 2,
            decoder_blocks: 1,
            model_dim: 16,
            heads: 2,
            ff_dim: 32,
            conv_kernel: 5,
            subsample_channels: 8,
            vocab: Vocab::new("abcd").unwrap(),
            lambda_train: 0.2,
            lambda_decode: 0.3,
            dropout: 0.1,
            label_smoothing: 0.1,
        };
        let model = Conformer::new(cfg).unwrap();
        let mut store = ParamStore::new();
        model.init_params(&mut store, 7).unwrap();
        (model, store)
    }

    fn feats(t: usize, f: usize, seed: u64) -> Tensor {
        let mut rng = stream(seed, "test/feats");
        Tensor::matrix(t, f, (0..t * f).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()).unwrap()
    }

    #[test]
    fn subsample_length_chain() {
        let (model, _) = tiny();
        // 16 -> 7 -> 3
        assert_eq!(model.subsampled_len(16).unwrap(), 3);
        assert_eq!(model.subsampled_len(7).unwrap(), 1);
        assert!(matches!(model.subsampled_len(6), Err(ModelError::InputTooShort { min: 7, .. })));
    }

    #[test]
    fn subsample_length_is_monotone() {
        let (model, _) = tiny();
        let mut prev = 0;
        for t in 7..200 {
            let cur = model.subsampled_len(t).unwrap();
            assert!(cur >= prev, "t={t}");
            prev = cur;
        }
        // doubling at least doubles-minus-constant
        for t in 7..100 {
            let t1 = model.subsampled_len(t).unwrap();
            let t2 = model.subsampled_len(2 * t).unwrap();
            assert!(t2 >= 2 * t1 - 2, "t={t}: {t1} vs {t2}");
        }
    }

    #[test]
    fn encode_output_shape() {
        let (model, store) = tiny();
        let x = feats(20, 12, 1);
        let mut g = Graph::new(GraphMode::Eval);
        let enc = model.encode(&mut g, &store, &x, None).unwrap();
        let t_out = model.subsampled_len(20).unwrap();
        assert_eq!(g.value(enc).shape(), &[t_out, 16]);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let (model, store) = tiny();
        let x = feats(18, 12, 2);
        let run = || {
            let mut g = Graph::new(GraphMode::Eval);
            let enc = model.encode(&mut g, &store, &x, None).unwrap();
            g.value(enc).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn decoder_shapes_and_determinism() {
        let (model, store) = tiny();
        let x = feats(18, 12, 3);
        let run = || {
            let mut g = Graph::new(GraphMode::Eval);
            let enc = model.encode(&mut g, &store, &x, None).unwrap();
            let logits = model.decoder_logits(&mut g, &store, enc, &[5, 1, 2]).unwrap();
            g.value(logits).data().to_vec()
        };
        let out = run();
        assert_eq!(out.len(), 3 * 6);
        assert_eq!(out, run());
    }

    #[test]
    fn identity_hook_matches_baseline_bitwise() {
        let (model, store) = tiny();
        let x = feats(17, 12, 4);
        let mut g1 = Graph::new(GraphMode::Eval);
        let base = model.encode(&mut g1, &store, &x, None).unwrap();
        let mut hook = |_: &mut Graph, h: NodeId| crate::autodiff::Result::Ok(h);
        let mut g2 = Graph::new(GraphMode::Eval);
        let adapted = model.encode(&mut g2, &store, &x, Some(&mut hook)).unwrap();
        assert_eq!(g1.value(base).data(), g2.value(adapted).data());
    }
}
