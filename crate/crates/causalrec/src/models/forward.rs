use crate::attention::{
    attention_flops, masked_attention_oracle, multihead_attention,
    strict_causal_attention_shifted, AttentionMask, ContextRule, RopeParams,
};
use crate::numeric::{Result as NumResult, Scalar, Tensor};

use super::layers::{Block, Linear, Mlp, MmoeParams, ParamInit};
use super::{
    mmoe_head, Architecture, ForwardMode, ModelConfig, ModelError, ModelOutput, Result,
    SequenceBatch,
};

/// One architecture instance: configuration plus parameters. Confined to a
/// single thread during a training step; parameters move freely between
/// threads between steps.
#[derive(Clone)]
pub struct Model<T: Scalar> {
    config: ModelConfig,
    rope: RopeParams,
    pub(crate) item_proj: Mlp<T>,
    pub(crate) action_proj: Mlp<T>,
    /// Transformer stack; the item stream for the dual-stream variant.
    pub(crate) blocks: Vec<Block<T>>,
    /// Action-stream blocks, dual-stream variant only.
    pub(crate) action_blocks: Vec<Block<T>>,
    /// Projects concat(final item rep, pooled action rep) back to d_model.
    pub(crate) fuse: Option<Linear<T>>,
    pub(crate) head: MmoeParams<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let rope = config.rope()?;
        let init = ParamInit::new(seed);
        let d = config.d_model;
        let arch = config.architecture;

        let dual = arch == Architecture::AttnDhn;
        let blocks = (0..config.n_layers)
            .map(|l| Block::init(&init, &format!("blocks.{l}"), d, dual))
            .collect();
        let action_blocks = if dual {
            (0..config.n_layers)
                .map(|l| Block::init(&init, &format!("action_blocks.{l}"), d, true))
                .collect()
        } else {
            Vec::new()
        };
        let fuse = matches!(arch, Architecture::AttnMvp | Architecture::AttnDhn)
            .then(|| init.linear("fuse", 2 * d, d, true));

        Ok(Model {
            config: config.clone(),
            rope,
            item_proj: Mlp::init(&init, "item_proj", config.d_item, d, d),
            action_proj: Mlp::init(&init, "action_proj", config.d_action, d, d),
            blocks,
            action_blocks,
            fuse,
            head: MmoeParams::init(
                &init,
                "head",
                d + config.late_fusion_dim,
                d,
                config.mmoe_experts,
                config.n_tasks,
            ),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.item_proj.visit("item_proj", f);
        self.action_proj.visit("action_proj", f);
        for (l, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("blocks.{l}"), f);
        }
        for (l, b) in self.action_blocks.iter().enumerate() {
            b.visit(&format!("action_blocks.{l}"), f);
        }
        if let Some(fuse) = &self.fuse {
            fuse.visit("fuse", f);
        }
        self.head.visit("head", f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.item_proj.visit_mut("item_proj", f);
        self.action_proj.visit_mut("action_proj", f);
        for (l, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("blocks.{l}"), f);
        }
        for (l, b) in self.action_blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("action_blocks.{l}"), f);
        }
        if let Some(fuse) = &mut self.fuse {
            fuse.visit_mut("fuse", f);
        }
        self.head.visit_mut("head", f);
    }

    pub fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, t| out.push((name, t.clone())));
        out
    }

    pub fn param(&self, name: &str) -> Option<Tensor<T>> {
        let mut found = None;
        self.visit_params(&mut |n, t| {
            if n == name {
                found = Some(t.clone());
            }
        });
        found
    }

    pub fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let mut hit = false;
        let mut shape_err = None;
        self.visit_params_mut(&mut |n, t| {
            if n == name {
                if t.shape() != value.shape() {
                    shape_err = Some(format!(
                        "parameter {n} has shape {:?}, replacement {:?}",
                        t.shape(),
                        value.shape()
                    ));
                } else {
                    *t = value.clone();
                }
                hit = true;
            }
        });
        if let Some(msg) = shape_err {
            return Err(ModelError::Config(msg));
        }
        if !hit {
            return Err(ModelError::Config(format!("no parameter named {name}")));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.numel());
        n
    }

    /// Item-step rope positions. Training uses real positions; evaluation
    /// pins every candidate to the first post-context position so each
    /// candidate is scored as the next event after the context, which makes
    /// joint and one-at-a-time candidate evaluation coincide.
    fn item_positions(n: usize, c: usize, mode: ForwardMode) -> Vec<usize> {
        match mode {
            ForwardMode::Train => (0..n).collect(),
            ForwardMode::Eval => (0..c).chain(std::iter::repeat(c).take(n - c)).collect(),
        }
    }

    /// Token-stream positions for the interleaved baseline (item token 2s,
    /// action token 2s+1; candidates pinned at 2c / 2c+1 under evaluation).
    fn token_positions(n: usize, c: usize, mode: ForwardMode) -> Vec<usize> {
        match mode {
            ForwardMode::Train => (0..2 * n).collect(),
            ForwardMode::Eval => {
                let mut pos: Vec<usize> = (0..2 * c).collect();
                for _ in c..n {
                    pos.push(2 * c);
                    pos.push(2 * c + 1);
                }
                pos
            }
        }
    }

    fn stack_mask(rule: ContextRule, n: usize, c: usize, mode: ForwardMode) -> NumResult<AttentionMask> {
        match mode {
            ForwardMode::Train => Ok(match rule {
                ContextRule::Causal => AttentionMask::causal(n),
                ContextRule::StrictCausal => AttentionMask::strict_causal(n),
            }),
            ForwardMode::Eval => AttentionMask::candidate_isolation(n, c, rule),
        }
    }

    fn run_block(
        &self,
        block: &Block<T>,
        h: &Tensor<T>,
        x: &Tensor<T>,
        value: &Tensor<T>,
        mask: &AttentionMask,
        positions: &[usize],
    ) -> NumResult<Tensor<T>> {
        let attn = multihead_attention(
            x,
            x,
            value,
            &block.attn,
            self.config.n_heads,
            mask,
            Some((&self.rope, positions)),
        )?;
        let h = h.add(&attn)?;
        let f = block.ffn.forward(&block.ln2.forward(&h)?)?;
        h.add(&f)
    }

    /// Standard self-attention stack (baseline token stream, late-fusion
    /// item stack): Q = K = V = normalized stream.
    fn run_stack(
        &self,
        h: Tensor<T>,
        mask: &AttentionMask,
        positions: &[usize],
    ) -> NumResult<Tensor<T>> {
        let mut h = h;
        for block in &self.blocks {
            let x = block.ln1.forward(&h)?;
            h = self.run_block(block, &h, &x, &x, mask, positions)?;
        }
        Ok(h)
    }

    /// Mixed-value stack: Q = K = normalized item stream, V = normalized
    /// item stream + λ · action embeddings, strict causal inside every
    /// layer so the injection never crosses the diagonal.
    fn run_stack_mixed(
        &self,
        h: Tensor<T>,
        injected: &Tensor<T>,
        mask: &AttentionMask,
        positions: &[usize],
    ) -> NumResult<Tensor<T>> {
        let lambda = T::from_f64(self.config.lambda);
        let mut h = h;
        for block in &self.blocks {
            let x = block.ln1.forward(&h)?;
            let v = x.add(&injected.scale(lambda)?)?;
            h = self.run_block(block, &h, &x, &v, mask, positions)?;
        }
        Ok(h)
    }

    /// One dual-stream block pair: the item stream updates with values
    /// ln(item) + λ·ln(action), then the action stream updates with values
    /// ln(post-update item) + λ·ln(action); both under the same mask.
    fn run_dual_stack(
        &self,
        item: Tensor<T>,
        action: Tensor<T>,
        mask: &AttentionMask,
        positions: &[usize],
    ) -> NumResult<(Tensor<T>, Tensor<T>)> {
        let lambda = T::from_f64(self.config.lambda);
        let mut hi = item;
        let mut ha = action;
        for (ib, ab) in self.blocks.iter().zip(&self.action_blocks) {
            let item_update = |hi: &Tensor<T>, ha: &Tensor<T>| -> NumResult<Tensor<T>> {
                let x = ib.ln1.forward(hi)?;
                let cross = ib.cross_ln.as_ref().expect("dual block").forward(ha)?;
                let v = x.add(&cross.scale(lambda)?)?;
                self.run_block(ib, hi, &x, &v, mask, positions)
            };
            let action_update = |ha: &Tensor<T>, hi: &Tensor<T>| -> NumResult<Tensor<T>> {
                let x = ab.ln1.forward(ha)?;
                let cross = ab.cross_ln.as_ref().expect("dual block").forward(hi)?;
                let v = cross.add(&x.scale(lambda)?)?;
                self.run_block(ab, ha, &x, &v, mask, positions)
            };
            if self.config.dhn_action_first {
                ha = action_update(&ha, &hi)?;
                hi = item_update(&hi, &ha)?;
            } else {
                hi = item_update(&hi, &ha)?;
                ha = action_update(&ha, &hi)?;
            }
        }
        Ok((hi, ha))
    }

    /// Final-stage action pooling: strict-causal attention with
    /// Q = K = item representations and V = action values, unprojected and
    /// without positional rotation (pure content similarity). Position 0
    /// pools nothing and yields the zero vector.
    fn pool_actions(
        &self,
        item_rep: &Tensor<T>,
        action_values: &Tensor<T>,
        c: usize,
        mode: ForwardMode,
    ) -> NumResult<Tensor<T>> {
        match mode {
            ForwardMode::Train => {
                strict_causal_attention_shifted(item_rep, item_rep, action_values)
            }
            ForwardMode::Eval => {
                let n = item_rep.shape()[0];
                let mask = AttentionMask::candidate_isolation(n, c, ContextRule::StrictCausal)?;
                masked_attention_oracle(item_rep, item_rep, action_values, &mask)
            }
        }
    }

    fn head_forward(&self, rep: &Tensor<T>, late: &Tensor<T>) -> Result<Tensor<T>> {
        let features = Tensor::concat_cols(&[rep.clone(), late.clone()])?;
        Ok(mmoe_head(&features, &self.head)?)
    }

    /// Per-step logits for one un-padded sequence.
    fn forward_sequence(
        &self,
        items_raw: &Tensor<T>,
        actions_raw: &Tensor<T>,
        late: &Tensor<T>,
        c: usize,
        mode: ForwardMode,
    ) -> Result<Tensor<T>> {
        let n = items_raw.shape()[0];
        let item_emb = self.item_proj.forward(items_raw)?;
        let action_emb = self.action_proj.forward(actions_raw)?;
        let positions = Self::item_positions(n, c, mode);

        let rep = match self.config.architecture {
            Architecture::InterleavedBaseline => {
                let tokens = item_emb.interleave_dim0(&action_emb)?;
                let tok_positions = Self::token_positions(n, c, mode);
                let mask = Self::stack_mask(ContextRule::Causal, 2 * n, 2 * c, mode)?;
                let h = self.run_stack(tokens, &mask, &tok_positions)?;
                let item_rows: Vec<usize> = (0..n).map(|s| 2 * s).collect();
                h.gather_dim0(&item_rows)?
            }
            Architecture::AttnLfa => {
                let mask = Self::stack_mask(ContextRule::Causal, n, c, mode)?;
                let h = self.run_stack(item_emb, &mask, &positions)?;
                self.pool_actions(&h, &action_emb, c, mode)?
            }
            Architecture::AttnMvp => {
                let mask = Self::stack_mask(ContextRule::StrictCausal, n, c, mode)?;
                let h = self.run_stack_mixed(item_emb, &action_emb, &mask, &positions)?;
                let pooled = self.pool_actions(&h, &action_emb, c, mode)?;
                let joined = Tensor::concat_cols(&[h, pooled])?;
                self.fuse.as_ref().expect("mvp fuse").forward(&joined)?
            }
            Architecture::AttnMvpNoLfa => {
                let mask = Self::stack_mask(ContextRule::StrictCausal, n, c, mode)?;
                self.run_stack_mixed(item_emb, &action_emb, &mask, &positions)?
            }
            Architecture::AttnDhn => {
                let mask = Self::stack_mask(ContextRule::StrictCausal, n, c, mode)?;
                let (hi, ha) = self.run_dual_stack(item_emb, action_emb, &mask, &positions)?;
                let pooled = self.pool_actions(&hi, &ha, c, mode)?;
                let joined = Tensor::concat_cols(&[hi, pooled])?;
                self.fuse.as_ref().expect("dhn fuse").forward(&joined)?
            }
        };
        self.head_forward(&rep, late)
    }

    /// Forward pass over a padded batch. Logits at padded steps are zero.
    pub fn forward(&self, batch: &SequenceBatch<T>, mode: ForwardMode) -> Result<ModelOutput<T>> {
        let cfg = &self.config;
        let dims = [
            (batch.item_features.shape()[2], cfg.d_item, "d_item"),
            (batch.action_features.shape()[2], cfg.d_action, "d_action"),
            (batch.labels.shape()[2], cfg.n_tasks, "n_tasks"),
            (batch.late_fusion.shape()[2], cfg.late_fusion_dim, "late_fusion_dim"),
        ];
        for (got, want, name) in dims {
            if got != want {
                return Err(ModelError::Config(format!(
                    "batch {name} is {got}, model expects {want}"
                )));
            }
        }
        let seq = batch.seq_len();
        if seq > cfg.max_seq_len {
            return Err(ModelError::Config(format!(
                "batch seq_len {seq} exceeds model max_seq_len {}",
                cfg.max_seq_len
            )));
        }

        let mut per_row = Vec::with_capacity(batch.rows());
        for r in 0..batch.rows() {
            let n = batch.valid_len[r];
            if n == 0 {
                per_row.push(Tensor::zeros(&[seq, cfg.n_tasks]));
                continue;
            }
            let c = match mode {
                ForwardMode::Train => n,
                ForwardMode::Eval => batch.context_len[r],
            };
            let items = SequenceBatch::row_slice(&batch.item_features, r, n)?;
            let actions = SequenceBatch::row_slice(&batch.action_features, r, n)?;
            let late = SequenceBatch::row_slice(&batch.late_fusion, r, n)?;
            let logits = self.forward_sequence(&items, &actions, &late, c, mode)?;
            per_row.push(if n < seq { logits.pad_dim0(0, seq - n)? } else { logits });
        }
        let logits = Tensor::concat_dim0(&per_row)?.reshape(&[batch.rows(), seq, cfg.n_tasks])?;

        let n_ref = batch.valid_len.iter().copied().max().unwrap_or(0).max(1);
        let updates = cfg.n_layers * cfg.architecture.attention_updates_per_layer();
        let total = attention_flops(n_ref, cfg.d_model, updates, cfg.architecture.is_interleaved());
        Ok(ModelOutput { logits, per_position_flops: total / n_ref as u64 })
    }
}
