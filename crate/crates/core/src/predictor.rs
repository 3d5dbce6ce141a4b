//! Causal decoder stack and autoregressive trajectory generation.
//!
//! Token sequences from the tokenizer are extended with embeddings of
//! per-step displacements (teacher-forced from ground truth during
//! training, fed back from the model's own outputs during generation) and
//! run through a stack of post-norm decoder layers under a causal mask.
//! The output head reads per-step displacements, which accumulate into
//! absolute positions from the last observed point.

use crate::model::{BoundParams, ModelConfig};
use crate::numkit::{NumError, Tape, Tensor, Var};
use crate::tokenizer::temporal_encoding;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Lower-triangular admissibility for self-attention over `size` positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CausalMask {
    size: usize,
}

impl CausalMask {
    pub fn new(size: usize) -> Self {
        CausalMask { size }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Query position `q` may attend to key position `k` iff `k <= q`.
    pub fn admissible(&self, q: usize, k: usize) -> bool {
        k <= q
    }
}

/// Whether a forward pass applies dropout (training) or not (inference).
pub enum ForwardMode<'r> {
    Infer,
    Train { rng: &'r mut ChaCha8Rng, rate: f64 },
}

impl ForwardMode<'_> {
    fn apply_dropout(&mut self, tape: &mut Tape, x: Var) -> Result<Var, NumError> {
        match self {
            ForwardMode::Infer => Ok(x),
            ForwardMode::Train { rng, rate } => tape.dropout(x, *rate, *rng),
        }
    }
}

/// Scaled dot-product attention for one head under a causal mask:
/// masked logits are treated as `-inf`, so each output row is a convex
/// combination of the value rows at positions `<= q`.
pub fn attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    mask: &CausalMask,
) -> Result<Var, NumError> {
    let len = tape.value(q).rows();
    if len != mask.size() {
        return Err(NumError::Config(format!(
            "mask sized {} but sequence length is {len}",
            mask.size()
        )));
    }
    let d_k = tape.value(q).cols();
    let kt = tape.transpose(k);
    let logits = tape.matmul(q, kt)?;
    let scaled = tape.scale(logits, 1.0 / (d_k as f64).sqrt());
    let probs = tape.causal_softmax(scaled)?;
    tape.matmul(probs, v)
}

fn multi_head(
    tape: &mut Tape,
    params: &BoundParams,
    cfg: &ModelConfig,
    layer: usize,
    x: Var,
    mask: &CausalMask,
) -> Result<Var, NumError> {
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 1..=cfg.n_heads {
        let q = tape.matmul(x, params.var(&format!("tp.layer{layer}.h{h}.wq")))?;
        let k = tape.matmul(x, params.var(&format!("tp.layer{layer}.h{h}.wk")))?;
        let v = tape.matmul(x, params.var(&format!("tp.layer{layer}.h{h}.wv")))?;
        heads.push(attention(tape, q, k, v, mask)?);
    }
    let joined = tape.concat_cols(&heads)?;
    tape.matmul(joined, params.var(&format!("tp.layer{layer}.wo")))
}

/// One post-norm decoder layer:
/// `a = LN(x + Dropout(MultiHead(x)))`, `out = LN(a + Dropout(FFN(a)))`.
pub fn decoder_layer(
    tape: &mut Tape,
    params: &BoundParams,
    cfg: &ModelConfig,
    layer: usize,
    x: Var,
    mask: &CausalMask,
    mode: &mut ForwardMode,
) -> Result<Var, NumError> {
    let attn = multi_head(tape, params, cfg, layer, x, mask)?;
    let attn = mode.apply_dropout(tape, attn)?;
    let res = tape.add(x, attn)?;
    let a = tape.layer_norm(
        res,
        params.var(&format!("tp.layer{layer}.ln1.g")),
        params.var(&format!("tp.layer{layer}.ln1.b")),
    )?;

    let h = tape.matmul(a, params.var(&format!("tp.layer{layer}.ffn.w3")))?;
    let h = tape.add_row(h, params.var(&format!("tp.layer{layer}.ffn.b3")))?;
    let h = tape.act(h)?;
    let ffn = tape.matmul(h, params.var(&format!("tp.layer{layer}.ffn.w4")))?;
    let ffn = tape.add_row(ffn, params.var(&format!("tp.layer{layer}.ffn.b4")))?;
    let ffn = mode.apply_dropout(tape, ffn)?;
    let res = tape.add(a, ffn)?;
    tape.layer_norm(
        res,
        params.var(&format!("tp.layer{layer}.ln2.g")),
        params.var(&format!("tp.layer{layer}.ln2.b")),
    )
}

/// Run the whole decoder stack under a causal mask sized to `x`.
pub fn run_stack(
    tape: &mut Tape,
    params: &BoundParams,
    cfg: &ModelConfig,
    x: Var,
    mode: &mut ForwardMode,
) -> Result<Var, NumError> {
    let mask = CausalMask::new(tape.value(x).rows());
    let mut h = x;
    for layer in 1..=cfg.n_layers {
        h = decoder_layer(tape, params, cfg, layer, h, &mask, mode)?;
    }
    Ok(h)
}

/// Per-step displacement targets for a future window: step 0 moves from the
/// last observed position, later steps from the previous future position.
pub fn future_deltas(last_observed: [f64; 2], future: &[[f64; 2]]) -> Tensor {
    let mut data = Vec::with_capacity(future.len() * 2);
    let mut prev = last_observed;
    for p in future {
        data.push(p[0] - prev[0]);
        data.push(p[1] - prev[1]);
        prev = *p;
    }
    Tensor::new(vec![future.len(), 2], data).expect("sized")
}

fn embed_deltas(
    tape: &mut Tape,
    params: &BoundParams,
    deltas: Var,
    encoding_rows: Var,
) -> Result<Var, NumError> {
    let emb = tape.matmul(deltas, params.var("tp.embed.wc"))?;
    let emb = tape.add_row(emb, params.var("tp.embed.bc"))?;
    tape.add(emb, encoding_rows)
}

/// Teacher-forced forward pass.
///
/// The input sequence holds the `t_oh` tokens followed by embeddings of the
/// ground-truth per-step displacements at positions `t_oh..t_oh+t_ph-1`.
/// The head reads positions `t_oh-1 ..= t_oh+t_ph-2` (each has seen
/// everything up to the step it predicts) and emits `t_ph` displacement
/// predictions. Returns the prediction and the ground-truth leaf for loss
/// construction.
pub fn forward_teacher_forced(
    tape: &mut Tape,
    params: &BoundParams,
    cfg: &ModelConfig,
    tokens: Var,
    last_observed: [f64; 2],
    future: &[[f64; 2]],
    mode: &mut ForwardMode,
) -> Result<(Var, Var), NumError> {
    let t_oh = cfg.t_oh;
    let t_ph = future.len();
    if tape.value(tokens).rows() != t_oh {
        return Err(NumError::BadShape {
            op: "forward_teacher_forced",
            shape: tape.value(tokens).shape().to_vec(),
            why: format!("expected {t_oh} token rows"),
        });
    }
    let gt = tape.leaf(future_deltas(last_observed, future));
    let pe = temporal_encoding(t_oh + t_ph, cfg.d_model)?;
    let pe_future = {
        let rows: Vec<f64> = pe.data()[t_oh * cfg.d_model..].to_vec();
        tape.leaf(Tensor::new(vec![t_ph, cfg.d_model], rows)?)
    };
    let emb = embed_deltas(tape, params, gt, pe_future)?;
    let seq = tape.concat_rows(&[tokens, emb])?;
    let out = run_stack(tape, params, cfg, seq, mode)?;
    let read = tape.slice_rows(out, t_oh - 1, t_ph)?;
    let pred = tape.matmul(read, params.var("tp.head.wout"))?;
    let pred = tape.add_row(pred, params.var("tp.head.bout"))?;
    Ok((pred, gt))
}

/// Future trajectory for one vehicle: the emitted per-step displacements
/// and their running sum from the last observed position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedTrajectory {
    pub positions: Vec<[f64; 2]>,
    pub deltas: Vec<[f64; 2]>,
}

impl PredictedTrajectory {
    pub fn from_deltas(last_observed: [f64; 2], deltas: Vec<[f64; 2]>) -> Self {
        let mut positions = Vec::with_capacity(deltas.len());
        let mut pos = last_observed;
        for d in &deltas {
            pos = [pos[0] + d[0], pos[1] + d[1]];
            positions.push(pos);
        }
        PredictedTrajectory { positions, deltas }
    }

    pub fn horizon(&self) -> usize {
        self.positions.len()
    }
}

/// Autoregressive generation: run the stack, read the head at the final
/// position, append the embedding of the predicted displacement (plus its
/// temporal encoding), and repeat until `t_ph` steps are out. The sequence
/// grows from `t_oh` to `t_oh + t_ph` rows.
pub fn generate(
    tape: &mut Tape,
    params: &BoundParams,
    cfg: &ModelConfig,
    tokens: Var,
    last_observed: [f64; 2],
    t_ph: usize,
    mode: &mut ForwardMode,
) -> Result<PredictedTrajectory, NumError> {
    if matches!(mode, ForwardMode::Train { .. }) {
        return Err(NumError::Config(
            "generation runs with dropout off; use ForwardMode::Infer".into(),
        ));
    }
    let t_oh = cfg.t_oh;
    let pe = temporal_encoding(t_oh + t_ph, cfg.d_model)?;
    let mut seq = tokens;
    let mut deltas = Vec::with_capacity(t_ph);
    for step in 0..t_ph {
        let out = run_stack(tape, params, cfg, seq, mode)?;
        let len = tape.value(out).rows();
        let last = tape.slice_rows(out, len - 1, 1)?;
        let delta = tape.matmul(last, params.var("tp.head.wout"))?;
        let delta = tape.add_row(delta, params.var("tp.head.bout"))?;
        let dv = tape.value(delta);
        if !dv.all_finite() {
            return Err(NumError::NonFinite { op: "generate" });
        }
        deltas.push([dv.at(0, 0), dv.at(0, 1)]);

        let pe_row = {
            let row: Vec<f64> = (0..cfg.d_model).map(|c| pe.at(t_oh + step, c)).collect();
            tape.leaf(Tensor::new(vec![1, cfg.d_model], row)?)
        };
        let emb = embed_deltas(tape, params, delta, pe_row)?;
        seq = tape.concat_rows(&[seq, emb])?;
    }
    Ok(PredictedTrajectory::from_deltas(last_observed, deltas))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::grad_check;
    use rand::Rng;
    use rand::SeedableRng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            t_oh: 4,
            t_ph: 3,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            ffn_width: 16,
            dropout: 0.0,
        }
    }

    fn rand_tensor(rng: &mut rand_chacha::ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn singleton_attention_returns_value_row() {
        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::row(&[0.3, -0.7]));
        let k = tape.leaf(Tensor::row(&[1.0, 2.0]));
        let v = tape.leaf(Tensor::row(&[5.0, -3.0]));
        let out = attention(&mut tape, q, k, v, &CausalMask::new(1)).unwrap();
        assert_eq!(tape.value(out).data(), &[5.0, -3.0]);
    }

    #[test]
    fn zero_queries_average_admissible_values() {
        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::zeros(&[3, 2]));
        let k = tape.leaf(Tensor::new(vec![3, 2], vec![0.4, -1.0, 2.0, 0.1, -0.6, 0.9]).unwrap());
        let v = tape.leaf(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let out = attention(&mut tape, q, k, v, &CausalMask::new(3)).unwrap();
        let got = tape.value(out);
        // Row q holds the mean of value rows 0..=q.
        assert_eq!(got.at(0, 0), 1.0);
        assert!((got.at(1, 0) - 2.0).abs() < 1e-12);
        assert!((got.at(2, 1) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn attention_matches_naive_loop() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let (len, d_k) = (5, 3);
        let (tq, tk, tv) = (
            rand_tensor(&mut rng, len, d_k),
            rand_tensor(&mut rng, len, d_k),
            rand_tensor(&mut rng, len, d_k),
        );
        let mut tape = Tape::new();
        let q = tape.leaf(tq.clone());
        let k = tape.leaf(tk.clone());
        let v = tape.leaf(tv.clone());
        let out = attention(&mut tape, q, k, v, &CausalMask::new(len)).unwrap();
        let got = tape.value(out);

        // Independent per-row computation with explicit loops.
        for qi in 0..len {
            let mut logits = vec![f64::NEG_INFINITY; len];
            for ki in 0..=qi {
                let mut dot = 0.0;
                for d in 0..d_k {
                    dot += tq.at(qi, d) * tk.at(ki, d);
                }
                logits[ki] = dot / (d_k as f64).sqrt();
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for d in 0..d_k {
                let mut want = 0.0;
                for ki in 0..len {
                    want += exps[ki] / sum * tv.at(ki, d);
                }
                assert!((got.at(qi, d) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let logits = rand_tensor(&mut rng, 6, 6);
        let mut tape = Tape::new();
        let l = tape.leaf(logits);
        let probs = tape.causal_softmax(l).unwrap();
        let t = tape.value(probs);
        for q in 0..6 {
            let sum: f64 = (0..6).map(|k| t.at(q, k)).sum();
            assert!((sum - 1.0).abs() <= 1e-12);
            for k in (q + 1)..6 {
                assert_eq!(t.at(q, k), 0.0);
            }
        }
    }

    #[test]
    fn decoder_layer_preserves_shape_and_causality() {
        let cfg = tiny_cfg();
        let store = cfg.init_params(3).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let x0 = rand_tensor(&mut rng, 6, cfg.d_model);

        let run = |input: &Tensor| {
            let mut tape = Tape::new();
            let params = BoundParams::bind(&store, &mut tape);
            let x = tape.leaf(input.clone());
            let out = run_stack(&mut tape, &params, &cfg, x, &mut ForwardMode::Infer).unwrap();
            tape.value(out).clone()
        };
        let base = run(&x0);
        assert_eq!(base.shape(), x0.shape());

        // Perturb position j; outputs before j must not move.
        for j in 0..6 {
            let mut bumped = x0.clone();
            for c in 0..cfg.d_model {
                let v = bumped.at(j, c) + 0.5;
                bumped.set(j, c, v);
            }
            let out = run(&bumped);
            for i in 0..j {
                for c in 0..cfg.d_model {
                    assert!(
                        (out.at(i, c) - base.at(i, c)).abs() <= 1e-12,
                        "row {i} moved when perturbing {j}"
                    );
                }
            }
        }
    }

    #[test]
    fn decoder_layer_gradient_check() {
        let cfg = tiny_cfg();
        let store = cfg.init_params(5).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let x0 = rand_tensor(&mut rng, 5, cfg.d_model);
        // h = 1e-4: layer norm leaves some directions nearly flat, so the
        // finite-difference oracle is rounding-limited at smaller steps.
        let err = grad_check(
            |tape, v| {
                let params = BoundParams::bind(&store, tape);
                let mask = CausalMask::new(5);
                let out =
                    decoder_layer(tape, &params, &cfg, 1, v, &mask, &mut ForwardMode::Infer)?;
                let sq = tape.square(out)?;
                Ok(tape.mean_all(sq))
            },
            &x0,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn zero_head_repeats_last_position() {
        let cfg = tiny_cfg();
        let mut store = cfg.init_params(2).unwrap();
        store.get_mut("tp.head.wout").unwrap().fill(0.0);
        store.get_mut("tp.head.bout").unwrap().fill(0.0);
        let mut tape = Tape::new();
        let params = BoundParams::bind(&store, &mut tape);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let tokens = tape.leaf(rand_tensor(&mut rng, cfg.t_oh, cfg.d_model));
        let last = [12.5, -3.0];
        let traj = generate(
            &mut tape,
            &params,
            &cfg,
            tokens,
            last,
            cfg.t_ph,
            &mut ForwardMode::Infer,
        )
        .unwrap();
        assert_eq!(traj.horizon(), cfg.t_ph);
        for p in &traj.positions {
            assert_eq!(*p, last);
        }

        // Teacher-forced with the zero head also emits all-zero deltas.
        let future = vec![[13.0, -3.0], [13.5, -3.0], [14.0, -3.0]];
        let (pred, _) = forward_teacher_forced(
            &mut tape,
            &params,
            &cfg,
            tokens,
            last,
            &future,
            &mut ForwardMode::Infer,
        )
        .unwrap();
        assert!(tape.value(pred).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn generate_consistent_with_teacher_forcing_on_own_outputs() {
        let cfg = tiny_cfg();
        let store = cfg.init_params(21).unwrap();
        let mut tape = Tape::new();
        let params = BoundParams::bind(&store, &mut tape);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let tokens = tape.leaf(rand_tensor(&mut rng, cfg.t_oh, cfg.d_model));
        let last = [1.0, 2.0];
        let traj = generate(
            &mut tape,
            &params,
            &cfg,
            tokens,
            last,
            cfg.t_ph,
            &mut ForwardMode::Infer,
        )
        .unwrap();
        let (pred, _) = forward_teacher_forced(
            &mut tape,
            &params,
            &cfg,
            tokens,
            last,
            &traj.positions,
            &mut ForwardMode::Infer,
        )
        .unwrap();
        let forced = tape.value(pred);
        for (k, d) in traj.deltas.iter().enumerate() {
            assert!((forced.at(k, 0) - d[0]).abs() <= 1e-10);
            assert!((forced.at(k, 1) - d[1]).abs() <= 1e-10);
        }
    }

    #[test]
    fn future_deltas_chain_from_last_observed() {
        let d = future_deltas([1.0, 1.0], &[[2.0, 1.0], [2.0, 3.0]]);
        assert_eq!(d.data(), &[1.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn positions_are_cumulative_sums() {
        let traj =
            PredictedTrajectory::from_deltas([10.0, 0.0], vec![[1.0, 1.0], [2.0, -1.0]]);
        assert_eq!(traj.positions, vec![[11.0, 1.0], [13.0, 0.0]]);
    }
}
