//! Prompt formation: decomposed prompt components with keys and attention
//! vectors, attended cosine weighting, orthogonality penalty, the
//! expansion-and-freeze schedule, and the two baseline selection
//! strategies (pool top-k and per-task).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::subseed;
use crate::tensor::{Tape, Tensor, COSINE_EPS};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(default)]
pub struct BankConfig {
    /// Total number of prompt components M.
    pub num_components: usize,
    /// Prompt length L_p (split into key/value halves, must be even).
    pub prompt_len: usize,
    pub embed_dim: usize,
    /// Orthogonality penalty weight λ.
    pub lambda: f64,
    /// When true, components not yet reached by the schedule contribute
    /// zero weight instead of participating with initial values.
    pub mask_future: bool,
    /// Ablation toggle: false drops the attention vectors so weighting is
    /// a plain query-key cosine.
    pub attention: bool,
    /// Ablation toggle: false leaves all scheduled components trainable
    /// in every task.
    pub freezing: bool,
}

impl Default for BankConfig {
    fn default() -> Self {
        BankConfig {
            num_components: 10,
            prompt_len: 4,
            embed_dim: 32,
            lambda: 0.05,
            mask_future: true,
            attention: true,
            freezing: true,
        }
    }
}

impl BankConfig {
    pub fn validate(&self, num_tasks: usize) -> Result<()> {
        let mut problems = Vec::new();
        if self.prompt_len % 2 != 0 || self.prompt_len == 0 {
            problems.push(format!("prompt_len {} must be even and positive", self.prompt_len));
        }
        if num_tasks == 0 || self.num_components % num_tasks != 0 {
            problems.push(format!(
                "num_components {} must be divisible by num_tasks {}",
                self.num_components, num_tasks
            ));
        }
        if self.lambda < 0.0 {
            problems.push(format!("lambda {} must be non-negative", self.lambda));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Per prompted layer: M components P_m [L_p×D], keys K_m [1×D], and
/// attention vectors A_m [1×D].
pub struct LayerBank {
    pub components: Vec<Tensor>,
    pub keys: Vec<Tensor>,
    pub attn: Vec<Tensor>,
}

/// Decomposed prompt parameters for every prompted layer, with the
/// frozen/trainable boundary maintained by the expansion schedule.
pub struct PromptBank {
    pub config: BankConfig,
    pub layers: Vec<LayerBank>,
    /// Components with index < frozen_count are frozen.
    pub frozen_count: usize,
    /// Components with index >= active_end exist but are not yet trained.
    pub active_end: usize,
    /// Trainable index ranges applied so far, one per expanded task.
    pub task_schedule: Vec<(usize, usize)>,
}

fn init_param(shape: Vec<usize>, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = 1.0 / (d as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

impl PromptBank {
    pub fn new(config: BankConfig, num_prompt_layers: usize, seed: u64) -> PromptBank {
        let d = config.embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, 0x62616e6b)); // "bank"
        let layers = (0..num_prompt_layers)
            .map(|_| {
                let components = (0..config.num_components)
                    .map(|_| init_param(vec![config.prompt_len, d], d, &mut rng))
                    .collect();
                let keys = (0..config.num_components)
                    .map(|_| init_param(vec![1, d], d, &mut rng))
                    .collect();
                let attn = (0..config.num_components)
                    .map(|_| init_param(vec![1, d], d, &mut rng))
                    .collect();
                LayerBank { components, keys, attn }
            })
            .collect();
        let m = config.num_components;
        PromptBank {
            config,
            layers,
            frozen_count: 0,
            active_end: m,
            task_schedule: Vec::new(),
        }
    }

    pub fn num_components(&self) -> usize {
        self.config.num_components
    }

    /// Copy with fresh tensors (shared nothing), preserving grad flags.
    pub fn deep_clone(&self) -> PromptBank {
        let clone_vec = |v: &Vec<Tensor>| -> Vec<Tensor> {
            v.iter()
                .map(|t| {
                    let c = Tensor::new(t.shape(), t.data());
                    c.set_requires_grad(t.tracks_grad());
                    c
                })
                .collect()
        };
        PromptBank {
            config: self.config.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerBank {
                    components: clone_vec(&l.components),
                    keys: clone_vec(&l.keys),
                    attn: clone_vec(&l.attn),
                })
                .collect(),
            frozen_count: self.frozen_count,
            active_end: self.active_end,
            task_schedule: self.task_schedule.clone(),
        }
    }

    /// Attended cosine weighting: α_m = cos(q ⊙ A_m, K_m), raw cosine
    /// values with no normalization. With attention ablated the query is
    /// matched directly against the keys.
    pub fn weight_alpha(&self, tape: &Tape, q: &Tensor, layer: usize) -> Vec<Tensor> {
        let bank = &self.layers[layer];
        (0..self.config.num_components)
            .map(|m| {
                if self.config.mask_future && m >= self.active_end {
                    return Tensor::scalar(0.0);
                }
                let attended = if self.config.attention {
                    tape.mul(q, &bank.attn[m])
                } else {
                    q.clone()
                };
                tape.cosine_sim(&attended, &bank.keys[m], COSINE_EPS)
            })
            .collect()
    }

    /// Plain values of α under no gradient recording.
    pub fn weight_alpha_values(&self, q: &Tensor, layer: usize) -> Vec<f64> {
        let tape = Tape::no_grad();
        self.weight_alpha(&tape, q, layer).iter().map(|a| a.value()).collect()
    }

    /// Weighted component sum p = Σ_m α_m · P_m.
    pub fn assemble_prompt(&self, tape: &Tape, alpha: &[Tensor], layer: usize) -> Tensor {
        assert_eq!(
            alpha.len(),
            self.config.num_components,
            "alpha length {} does not match component count {}",
            alpha.len(),
            self.config.num_components
        );
        let bank = &self.layers[layer];
        let mut acc = tape.scale_by(&alpha[0], &bank.components[0]);
        for m in 1..alpha.len() {
            let term = tape.scale_by(&alpha[m], &bank.components[m]);
            acc = tape.add(&acc, &term);
        }
        acc
    }

    /// Produce the prompt for one layer directly from a query.
    pub fn prompt_for(&self, tape: &Tape, q: &Tensor, layer: usize) -> Tensor {
        let alpha = self.weight_alpha(tape, q, layer);
        self.assemble_prompt(tape, &alpha, layer)
    }

    /// Orthogonality penalty summed over P, K, and A of every prompted
    /// layer, over the expanded rows only (components past `active_end`
    /// do not exist yet). Gradients reach only trainable rows via
    /// requires_grad flags.
    pub fn ortho_loss_total(&self, tape: &Tape) -> Tensor {
        let end = self.active_end.max(1);
        let mut total = Tensor::scalar(0.0);
        for layer in 0..self.layers.len() {
            let bank = &self.layers[layer];
            let flat: Vec<Tensor> = bank.components[..end]
                .iter()
                .map(|p| tape.reshape(p, vec![1, self.config.prompt_len * self.config.embed_dim]))
                .collect();
            for rows in [
                flat.iter().collect::<Vec<_>>(),
                bank.keys[..end].iter().collect(),
                bank.attn[..end].iter().collect(),
            ] {
                let term = ortho_loss_rows(tape, &rows);
                total = tape.add(&total, &term);
            }
        }
        total
    }

    /// Advance the expansion schedule to task `n` of `N` (1-based):
    /// freeze the first (n−1)·M/N components and mark the next M/N
    /// trainable. Later components stay at initial values with no
    /// gradient.
    pub fn expand(&mut self, task_index: usize, num_tasks: usize) -> Result<()> {
        let m = self.config.num_components;
        if num_tasks == 0 || m % num_tasks != 0 {
            return Err(Error::Config(format!(
                "num_components {m} must be divisible by num_tasks {num_tasks}"
            )));
        }
        if task_index == 0 || task_index > num_tasks {
            return Err(Error::Config(format!(
                "task index {task_index} outside [1, {num_tasks}]"
            )));
        }
        let per_task = m / num_tasks;
        self.frozen_count = if self.config.freezing { (task_index - 1) * per_task } else { 0 };
        self.active_end = task_index * per_task;
        let trainable = (self.frozen_count, self.active_end);
        self.task_schedule.push(trainable);
        for layer in &self.layers {
            for idx in 0..m {
                let on = idx >= trainable.0 && idx < trainable.1;
                layer.components[idx].set_requires_grad(on);
                layer.keys[idx].set_requires_grad(on);
                layer.attn[idx].set_requires_grad(on);
            }
        }
        Ok(())
    }

    /// Parameters in the current trainable range, all layers.
    pub fn trainable_params(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for layer in &self.layers {
            for idx in 0..self.config.num_components {
                if layer.components[idx].requires_grad() {
                    out.push(layer.components[idx].clone());
                    out.push(layer.keys[idx].clone());
                    out.push(layer.attn[idx].clone());
                }
            }
        }
        out
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend(layer.components.iter().cloned());
            out.extend(layer.keys.iter().cloned());
            out.extend(layer.attn.iter().cloned());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }

    /// SHA-256 over components with index < `upto`, all layers.
    pub fn prefix_hash(&self, upto: usize) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for layer in &self.layers {
            for idx in 0..upto.min(self.config.num_components) {
                for t in [&layer.components[idx], &layer.keys[idx], &layer.attn[idx]] {
                    for v in t.data_ref().iter() {
                        hasher.update(v.to_bits().to_le_bytes());
                    }
                }
            }
        }
        hasher.finalize().into()
    }
}

/// ‖B·Bᵀ − I‖_F over a row list (each row a [1×len] tensor).
pub fn ortho_loss_rows(tape: &Tape, rows: &[&Tensor]) -> Tensor {
    assert!(!rows.is_empty(), "ortho_loss over empty row set");
    let b = tape.concat_rows(rows);
    ortho_loss(tape, &b)
}

/// ‖B·Bᵀ − I_R‖_F for an R-row matrix B.
pub fn ortho_loss(tape: &Tape, b: &Tensor) -> Tensor {
    let (r, _) = b.dims2();
    let gram = tape.matmul_nt(b, b);
    let mut eye = vec![0.0; r * r];
    for i in 0..r {
        eye[i * r + i] = 1.0;
    }
    let diff = tape.sub(&gram, &Tensor::new(vec![r, r], eye));
    tape.frobenius_norm(&diff)
}

/// True iff the α entries for frozen indices are bitwise identical between
/// the two banks under the same query, at every prompted layer.
pub fn alpha_expansion_invariance_check(before: &PromptBank, after: &PromptBank, q: &Tensor) -> bool {
    if before.layers.len() != after.layers.len() {
        return false;
    }
    let frozen = before.frozen_count.min(after.frozen_count.max(before.frozen_count));
    for layer in 0..before.layers.len() {
        let a = before.weight_alpha_values(q, layer);
        let b = after.weight_alpha_values(q, layer);
        for idx in 0..frozen {
            if a[idx].to_bits() != b[idx].to_bits() {
                return false;
            }
        }
    }
    true
}

// ── Baseline strategies ─────────────────────────────────────────────

/// Pool of whole prompts with per-prompt keys; top-k cosine selection.
pub struct PromptPool {
    pub prompts: Vec<Tensor>,
    pub keys: Vec<Tensor>,
    pub top_k: usize,
}

impl PromptPool {
    pub fn new(pool_size: usize, top_k: usize, prompt_len: usize, embed_dim: usize, seed: u64) -> Result<PromptPool> {
        if pool_size == 0 {
            return Err(Error::Config("prompt pool must be non-empty".into()));
        }
        if top_k == 0 || top_k > pool_size {
            return Err(Error::Config(format!(
                "top_k {top_k} must be in [1, pool size {pool_size}]"
            )));
        }
        if prompt_len % 2 != 0 {
            return Err(Error::Config(format!("prompt_len {prompt_len} must be even")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, 0x706f6f6c)); // "pool"
        let prompts = (0..pool_size)
            .map(|_| init_param(vec![prompt_len, embed_dim], embed_dim, &mut rng))
            .collect();
        let keys = (0..pool_size)
            .map(|_| init_param(vec![1, embed_dim], embed_dim, &mut rng))
            .collect();
        Ok(PromptPool { prompts, keys, top_k })
    }

    /// Select the top-k prompts by key-query cosine similarity (ties break
    /// to the lower index), concatenated into a single [(k·L_p)×D] prompt.
    /// Selection itself passes no gradient; the returned indices feed the
    /// key pull loss.
    pub fn select(&self, tape: &Tape, q: &Tensor) -> (Tensor, Vec<usize>) {
        let scores: Vec<f64> = {
            let t = Tape::no_grad();
            self.keys
                .iter()
                .map(|k| t.cosine_sim(q, k, COSINE_EPS).value())
                .collect()
        };
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        let picked: Vec<usize> = order[..self.top_k].to_vec();
        let parts: Vec<&Tensor> = picked.iter().map(|&i| &self.prompts[i]).collect();
        (tape.concat_rows(&parts), picked)
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        self.prompts.iter().chain(self.keys.iter()).cloned().collect()
    }
}

/// Mean over matched keys of (1 − cos(q, k)). The query is detached so
/// gradients reach the keys only.
pub fn key_pull_loss(tape: &Tape, q: &Tensor, matched_keys: &[&Tensor]) -> Tensor {
    assert!(!matched_keys.is_empty(), "key_pull_loss needs at least one matched key");
    let q = q.detach();
    let mut acc = Tensor::scalar(0.0);
    for k in matched_keys {
        let c = tape.cosine_sim(&q, k, COSINE_EPS);
        let one_minus = tape.add(&tape.scale(&c, -1.0), &Tensor::scalar(1.0));
        acc = tape.add(&acc, &one_minus);
    }
    tape.scale(&acc, 1.0 / matched_keys.len() as f64)
}

/// One prompt and key per task; task id selects during training, the
/// closest key during inference.
pub struct PerTaskPrompts {
    pub prompts: Vec<Tensor>,
    pub keys: Vec<Tensor>,
}

pub enum PerTaskQuery<'a> {
    TaskId(usize),
    Query(&'a Tensor),
}

impl PerTaskPrompts {
    pub fn new(num_tasks: usize, prompt_len: usize, embed_dim: usize, seed: u64) -> Result<PerTaskPrompts> {
        if prompt_len % 2 != 0 {
            return Err(Error::Config(format!("prompt_len {prompt_len} must be even")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, 0x7461736b)); // "task"
        let prompts = (0..num_tasks)
            .map(|_| init_param(vec![prompt_len, embed_dim], embed_dim, &mut rng))
            .collect();
        let keys = (0..num_tasks)
            .map(|_| init_param(vec![1, embed_dim], embed_dim, &mut rng))
            .collect();
        Ok(PerTaskPrompts { prompts, keys })
    }

    /// Returns the selected prompt and its index.
    pub fn select(&self, query: PerTaskQuery) -> Result<(Tensor, usize)> {
        match query {
            PerTaskQuery::TaskId(id) => {
                let p = self
                    .prompts
                    .get(id)
                    .ok_or_else(|| Error::Config(format!("unknown task id {id} (have {})", self.prompts.len())))?;
                Ok((p.clone(), id))
            }
            PerTaskQuery::Query(q) => {
                let t = Tape::no_grad();
                let mut best = 0usize;
                let mut best_score = f64::NEG_INFINITY;
                for (i, k) in self.keys.iter().enumerate() {
                    let s = t.cosine_sim(q, k, COSINE_EPS).value();
                    if s > best_score {
                        best_score = s;
                        best = i;
                    }
                }
                Ok((self.prompts[best].clone(), best))
            }
        }
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        self.prompts.iter().chain(self.keys.iter()).cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::Rng;

    fn micro_bank(m: usize, lp: usize, d: usize, seed: u64) -> PromptBank {
        PromptBank::new(
            BankConfig {
                num_components: m,
                prompt_len: lp,
                embed_dim: d,
                lambda: 1.0,
                mask_future: false,
                attention: true,
                freezing: true,
            },
            1,
            seed,
        )
    }

    #[test]
    fn all_ones_attention_reduces_to_plain_cosine() {
        let bank = micro_bank(4, 2, 6, 1);
        for a in &bank.layers[0].attn {
            a.set_data(vec![1.0; 6]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = Tensor::uniform(vec![1, 6], -1.0, 1.0, &mut rng);
        let alpha = bank.weight_alpha_values(&q, 0);
        let t = Tape::no_grad();
        for (m, a) in alpha.iter().enumerate() {
            let plain = t.cosine_sim(&q, &bank.layers[0].keys[m], COSINE_EPS).value();
            assert!((a - plain).abs() < 1e-15);
        }
    }

    #[test]
    fn query_equal_to_key_with_ones_attention_gives_one() {
        let bank = micro_bank(3, 2, 5, 3);
        bank.layers[0].attn[1].set_data(vec![1.0; 5]);
        let q = bank.layers[0].keys[1].detach();
        let alpha = bank.weight_alpha_values(&q, 0);
        assert!((alpha[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn alpha_matches_scalar_loop_oracle() {
        let bank = micro_bank(5, 2, 6, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = Tensor::uniform(vec![1, 6], -1.0, 1.0, &mut rng);
        let alpha = bank.weight_alpha_values(&q, 0);
        let qd = q.data();
        for m in 0..5 {
            let ad = bank.layers[0].attn[m].data();
            let kd = bank.layers[0].keys[m].data();
            let attended: Vec<f64> = qd.iter().zip(&ad).map(|(x, y)| x * y).collect();
            let dot: f64 = attended.iter().zip(&kd).map(|(x, y)| x * y).sum();
            let nu = attended.iter().map(|x| x * x).sum::<f64>().sqrt().max(COSINE_EPS);
            let nv = kd.iter().map(|x| x * x).sum::<f64>().sqrt().max(COSINE_EPS);
            let expect = dot / (nu * nv);
            assert!((alpha[m] - expect).abs() < 1e-12, "component {m}");
            assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&alpha[m]));
        }
    }

    #[test]
    fn one_hot_alpha_selects_component_exactly() {
        let bank = micro_bank(4, 2, 4, 9);
        let tape = Tape::no_grad();
        for target in 0..4 {
            let alpha: Vec<Tensor> = (0..4)
                .map(|m| Tensor::scalar(if m == target { 1.0 } else { 0.0 }))
                .collect();
            let p = bank.assemble_prompt(&tape, &alpha, 0);
            assert!(p.bitwise_eq(&bank.layers[0].components[target]));
        }
    }

    #[test]
    fn zero_alpha_gives_zero_prompt() {
        let bank = micro_bank(4, 2, 4, 10);
        let tape = Tape::no_grad();
        let alpha: Vec<Tensor> = (0..4).map(|_| Tensor::scalar(0.0)).collect();
        let p = bank.assemble_prompt(&tape, &alpha, 0);
        assert!(p.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn assemble_matches_accumulation_loop() {
        let bank = micro_bank(4, 2, 4, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let alpha_vals: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let alpha: Vec<Tensor> = alpha_vals.iter().map(|&v| Tensor::scalar(v)).collect();
        let tape = Tape::no_grad();
        let p = bank.assemble_prompt(&tape, &alpha, 0);
        let mut expect = vec![0.0; 8];
        for m in 0..4 {
            for (e, x) in expect.iter_mut().zip(bank.layers[0].components[m].data()) {
                *e += alpha_vals[m] * x;
            }
        }
        for (a, b) in p.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ortho_loss_orthonormal_rows_is_zero() {
        let tape = Tape::no_grad();
        // orthonormal 3×4 rows
        let b = Tensor::new(
            vec![3, 4],
            vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        );
        assert!(ortho_loss(&tape, &b).value() <= 1e-9);
    }

    #[test]
    fn ortho_loss_scaled_identity_closed_form() {
        let tape = Tape::no_grad();
        let mut data = vec![0.0; 16];
        for i in 0..4 {
            data[i * 4 + i] = 2.0;
        }
        let b = Tensor::new(vec![4, 4], data);
        // ‖4I − I‖_F = 3·√4 = 6
        assert!((ortho_loss(&tape, &b).value() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn ortho_loss_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let b = Tensor::uniform(vec![3, 5], -1.0, 1.0, &mut rng);
        let err = grad_check(|t| ortho_loss(t, &b), &[b.clone()]);
        assert!(err < 1e-5, "ortho max relative error {err}");
    }

    #[test]
    fn expansion_schedule_arithmetic() {
        let mut bank = PromptBank::new(
            BankConfig { num_components: 100, prompt_len: 2, embed_dim: 4, ..Default::default() },
            1,
            1,
        );
        bank.expand(1, 10).unwrap();
        assert_eq!(bank.frozen_count, 0);
        assert_eq!(bank.task_schedule.last(), Some(&(0, 10)));
        assert_eq!(bank.trainable_params().len(), 10 * 3);
        bank.expand(3, 10).unwrap();
        assert_eq!(bank.frozen_count, 20);
        assert_eq!(bank.task_schedule.last(), Some(&(20, 30)));
    }

    #[test]
    fn expansion_requires_divisibility() {
        let mut bank = micro_bank(5, 2, 4, 1);
        assert!(matches!(bank.expand(1, 3), Err(Error::Config(_))));
    }

    #[test]
    fn alpha_invariance_under_trainable_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let q = Tensor::uniform(vec![1, 4], -1.0, 1.0, &mut rng);
        let mk = || {
            let mut b = micro_bank(6, 2, 4, 33);
            b.frozen_count = 2;
            b.active_end = 4;
            b
        };
        let before = mk();
        let after = mk();
        // perturb only non-frozen components (indices 2..5)
        for idx in 2..6 {
            for t in [
                &after.layers[0].components[idx],
                &after.layers[0].keys[idx],
                &after.layers[0].attn[idx],
            ] {
                let mut d = t.data();
                for v in &mut d {
                    *v += rng.random_range(-0.5..0.5);
                }
                t.set_data(d);
            }
        }
        assert!(alpha_expansion_invariance_check(&before, &after, &q));

        // adversarial: touch a frozen key
        let adversarial = mk();
        let mut d = adversarial.layers[0].keys[0].data();
        d[0] += 0.25;
        adversarial.layers[0].keys[0].set_data(d);
        assert!(!alpha_expansion_invariance_check(&before, &adversarial, &q));
    }

    #[test]
    fn pool_select_single() {
        let pool = PromptPool::new(1, 1, 2, 4, 5).unwrap();
        let tape = Tape::no_grad();
        let q = Tensor::new(vec![1, 4], vec![1.0, 0.0, 0.0, 0.0]);
        let (p, idx) = pool.select(&tape, &q);
        assert_eq!(idx, vec![0]);
        assert!(p.bitwise_eq(&pool.prompts[0]));
    }

    #[test]
    fn pool_select_exact_key_ranks_first() {
        let pool = PromptPool::new(3, 1, 2, 4, 6).unwrap();
        pool.keys[0].set_data(vec![0.0, 1.0, 0.0, 0.0]);
        pool.keys[1].set_data(vec![1.0, 0.0, 0.0, 0.0]);
        pool.keys[2].set_data(vec![0.0, 0.0, 1.0, 0.0]);
        let tape = Tape::no_grad();
        let q = Tensor::new(vec![1, 4], vec![1.0, 0.0, 0.0, 0.0]);
        let (_, idx) = pool.select(&tape, &q);
        assert_eq!(idx[0], 1);
    }

    #[test]
    fn pool_select_matches_sort_oracle() {
        let pool = PromptPool::new(8, 3, 2, 6, 17).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let q = Tensor::uniform(vec![1, 6], -1.0, 1.0, &mut rng);
        let tape = Tape::no_grad();
        let (_, idx) = pool.select(&tape, &q);
        // exhaustive oracle
        let t = Tape::no_grad();
        let mut scored: Vec<(usize, f64)> = pool
            .keys
            .iter()
            .enumerate()
            .map(|(i, k)| (i, t.cosine_sim(&q, k, COSINE_EPS).value()))
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let expect: Vec<usize> = scored[..3].iter().map(|(i, _)| *i).collect();
        assert_eq!(idx, expect);
    }

    #[test]
    fn key_pull_loss_values() {
        let tape = Tape::new();
        let q = Tensor::new(vec![1, 2], vec![1.0, 0.0]);
        let same = Tensor::new(vec![1, 2], vec![2.0, 0.0]);
        let perp = Tensor::new(vec![1, 2], vec![0.0, 3.0]);
        assert!(key_pull_loss(&tape, &q, &[&same]).value().abs() < 1e-12);
        assert!((key_pull_loss(&tape, &q, &[&perp]).value() - 1.0).abs() < 1e-12);
        assert!((key_pull_loss(&tape, &q, &[&same, &perp]).value() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn key_pull_loss_never_reaches_query() {
        let tape = Tape::new();
        let q = Tensor::new(vec![1, 3], vec![0.4, -0.2, 0.9]);
        q.set_requires_grad(true);
        let k = Tensor::new(vec![1, 3], vec![0.1, 0.8, -0.3]);
        k.set_requires_grad(true);
        let loss = key_pull_loss(&tape, &q, &[&k]);
        tape.backward(&loss);
        assert!(q.grad().is_none(), "query must be gradient-detached");
        assert!(k.grad().is_some());
    }

    #[test]
    fn per_task_selection() {
        let pts = PerTaskPrompts::new(4, 2, 4, 3).unwrap();
        let (p, idx) = pts.select(PerTaskQuery::TaskId(2)).unwrap();
        assert_eq!(idx, 2);
        assert!(p.bitwise_eq(&pts.prompts[2]));
        assert!(pts.select(PerTaskQuery::TaskId(9)).is_err());

        // inference with q equal to keys[0], distinct keys
        let q = pts.keys[0].detach();
        let (_, idx) = pts.select(PerTaskQuery::Query(&q)).unwrap();
        assert_eq!(idx, 0);

        // brute-force argmax oracle over random keys
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let q = Tensor::uniform(vec![1, 4], -1.0, 1.0, &mut rng);
        let (_, idx) = pts.select(PerTaskQuery::Query(&q)).unwrap();
        let t = Tape::no_grad();
        let scores: Vec<f64> = pts.keys.iter().map(|k| t.cosine_sim(&q, k, COSINE_EPS).value()).collect();
        let best = scores
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .unwrap()
            .0;
        assert_eq!(idx, best);
    }

    #[test]
    fn selection_reduction_property() {
        // With A all-ones and α replaced by a one-hot at its argmax,
        // assemble_prompt reproduces a hard index selection.
        let bank = micro_bank(5, 2, 4, 40);
        for a in &bank.layers[0].attn {
            a.set_data(vec![1.0; 4]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let q = Tensor::uniform(vec![1, 4], -1.0, 1.0, &mut rng);
        let alpha = bank.weight_alpha_values(&q, 0);
        let best = crate::vit::argmax(&alpha);
        let one_hot: Vec<Tensor> = (0..5)
            .map(|m| Tensor::scalar(if m == best { 1.0 } else { 0.0 }))
            .collect();
        let tape = Tape::no_grad();
        let p = bank.assemble_prompt(&tape, &one_hot, 0);
        assert!(p.bitwise_eq(&bank.layers[0].components[best]));
    }
}
