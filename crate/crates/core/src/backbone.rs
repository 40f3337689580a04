//! Compact vision transformer with per-block feature taps and final-block
//! attention capture.
//!
//! Token rows are laid out per sample as `[CLS, registers..., patches...]`.
//! Blocks are pre-norm: norm -> attention -> residual -> norm -> MLP ->
//! residual. A block's tapped features are its output after the residual
//! additions, before any following norm; the final layer norm is applied
//! only to the `tokens` output that pretraining heads and probes consume.

use std::collections::BTreeSet;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::numerics::functional::Mode;
use crate::numerics::{ParamSet, Rng, Scalar, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Architecture description of the backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    /// Number of transformer blocks.
    pub depth: usize,
    /// Token embedding width.
    pub width: usize,
    pub heads: usize,
    /// Number of register tokens.
    pub registers: usize,
    pub mlp_ratio: f64,
    pub dropout_rate: f64,
}

impl Default for ViTConfig {
    /// Desk-scale default: minutes of CPU training, deep enough for block
    /// ablations to be meaningful.
    fn default() -> Self {
        ViTConfig {
            image_size: 28,
            patch_size: 7,
            channels: 1,
            depth: 8,
            width: 64,
            heads: 4,
            registers: 4,
            mlp_ratio: 4.0,
            dropout_rate: 0.0,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.depth == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::Config("depth, width, channels must be positive".into()));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.mlp_ratio <= 0.0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate {} not in [0,1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Patches per image side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Total token count: CLS + registers + patches.
    pub fn tokens(&self) -> usize {
        1 + self.registers + self.num_patches()
    }

    pub fn mlp_dim(&self) -> usize {
        (self.width as f64 * self.mlp_ratio).round() as usize
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// Disjoint row index sets covering one sample's token matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenLayout {
    tokens: usize,
    registers: usize,
}

impl TokenLayout {
    pub fn cls_row(&self) -> usize {
        0
    }

    pub fn register_rows(&self) -> Range<usize> {
        1..1 + self.registers
    }

    pub fn patch_rows(&self) -> Range<usize> {
        1 + self.registers..self.tokens
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }
}

pub fn token_layout(config: &ViTConfig) -> TokenLayout {
    TokenLayout {
        tokens: config.tokens(),
        registers: config.registers,
    }
}

/// Token matrix snapshot of one sample at one block.
#[derive(Debug, Clone)]
pub struct BlockFeatures<E: Scalar = f32> {
    pub block_index: usize,
    /// [tokens, width], row 0 = CLS, rows 1..=R = registers, rest patches.
    pub tokens: Tensor<E>,
}

/// Post-softmax attention of one sample at one block: [heads, T, T].
#[derive(Debug, Clone)]
pub struct AttentionRecord<E: Scalar = f32> {
    pub block_index: usize,
    pub heads: usize,
    pub tokens: usize,
    pub weights: Vec<E>,
}

impl<E: Scalar> AttentionRecord<E> {
    /// Attention row for (head, query) over all keys.
    pub fn row(&self, head: usize, query: usize) -> &[E] {
        let t = self.tokens;
        &self.weights[(head * t + query) * t..(head * t + query + 1) * t]
    }
}

/// Set of 1-based block indices whose outputs are tapped.
#[derive(Debug, Clone, Default)]
pub struct TapSpec(BTreeSet<usize>);

impl TapSpec {
    pub fn none() -> Self {
        TapSpec(BTreeSet::new())
    }

    pub fn of(indices: impl IntoIterator<Item = usize>) -> Self {
        TapSpec(indices.into_iter().collect())
    }

    /// The final `k` blocks of a depth-`n` backbone, ascending.
    pub fn final_blocks(depth: usize, k: usize) -> Self {
        TapSpec((depth - k + 1..=depth).collect())
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0.contains(&i)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        for &i in &self.0 {
            if i == 0 || i > depth {
                return Err(Error::Config(format!(
                    "tap index {i} out of range 1..={depth}"
                )));
            }
        }
        Ok(())
    }
}

/// Everything a forward pass produces.
pub struct ForwardPass<E: Scalar> {
    /// Final tokens after the final layer norm, [batch*T, width].
    pub tokens: Var,
    /// Final block output before the final norm (the deepest tap).
    pub pre_norm_tokens: Var,
    /// Tapped block outputs in ascending block order, [batch*T, width] each.
    pub taps: Vec<(usize, Var)>,
    /// Final-block attention, one record per sample.
    pub attention: Vec<AttentionRecord<E>>,
    pub batch: usize,
}

/// The backbone: a config plus its named parameter set.
#[derive(Debug, Clone)]
pub struct Backbone<E: Scalar = f32> {
    config: ViTConfig,
    params: ParamSet<E>,
}

fn normal_tensor<E: Scalar>(shape: Vec<usize>, std: f64, rng: &mut Rng) -> Tensor<E> {
    let n: usize = shape.iter().product();
    let data: Vec<E> = (0..n).map(|_| E::from_f64(rng.normal_f64() * std)).collect();
    Tensor::new(shape, data).expect("normal_tensor shape")
}

pub fn block_prefix(i: usize) -> String {
    format!("block{i:02}/")
}

impl<E: Scalar> Backbone<E> {
    /// Fresh backbone with normal(0, 0.02) weights, zero biases, identity
    /// norms. All parameters start trainable.
    pub fn init(config: ViTConfig, rng: &Rng) -> Result<Self> {
        config.validate()?;
        let mut rng = rng.split("backbone-init");
        let d = config.width;
        let std = 0.02;
        let mut params = ParamSet::new();
        let t = |t: Tensor<E>| t.with_trainable(true);

        params.insert(
            "patch/proj_w",
            t(normal_tensor(vec![config.patch_dim(), d], std, &mut rng)),
        )?;
        params.insert("patch/proj_b", t(Tensor::zeros(vec![d])))?;
        params.insert(
            "patch/pos",
            t(normal_tensor(vec![config.num_patches(), d], std, &mut rng)),
        )?;
        params.insert("token/cls", t(normal_tensor(vec![1, d], std, &mut rng)))?;
        if config.registers > 0 {
            params.insert(
                "token/reg",
                t(normal_tensor(vec![config.registers, d], std, &mut rng)),
            )?;
        }
        let mlp = config.mlp_dim();
        for i in 1..=config.depth {
            let p = block_prefix(i);
            params.insert(format!("{p}ln1_g"), t(Tensor::full(vec![d], 1.0)))?;
            params.insert(format!("{p}ln1_b"), t(Tensor::zeros(vec![d])))?;
            params.insert(
                format!("{p}qkv_w"),
                t(normal_tensor(vec![d, 3 * d], std, &mut rng)),
            )?;
            params.insert(format!("{p}qkv_b"), t(Tensor::zeros(vec![3 * d])))?;
            params.insert(
                format!("{p}attn_w"),
                t(normal_tensor(vec![d, d], std, &mut rng)),
            )?;
            params.insert(format!("{p}attn_b"), t(Tensor::zeros(vec![d])))?;
            params.insert(format!("{p}ln2_g"), t(Tensor::full(vec![d], 1.0)))?;
            params.insert(format!("{p}ln2_b"), t(Tensor::zeros(vec![d])))?;
            params.insert(
                format!("{p}mlp1_w"),
                t(normal_tensor(vec![d, mlp], std, &mut rng)),
            )?;
            params.insert(format!("{p}mlp1_b"), t(Tensor::zeros(vec![mlp])))?;
            params.insert(
                format!("{p}mlp2_w"),
                t(normal_tensor(vec![mlp, d], std, &mut rng)),
            )?;
            params.insert(format!("{p}mlp2_b"), t(Tensor::zeros(vec![d])))?;
        }
        params.insert("final_norm/g", t(Tensor::full(vec![d], 1.0)))?;
        params.insert("final_norm/b", t(Tensor::zeros(vec![d])))?;
        Ok(Backbone { config, params })
    }

    pub fn from_parts(config: ViTConfig, params: ParamSet<E>) -> Result<Self> {
        config.validate()?;
        Ok(Backbone { config, params })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<E> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<E> {
        &mut self.params
    }

    pub fn layout(&self) -> TokenLayout {
        token_layout(&self.config)
    }

    /// Flatten images into the patch-pixel matrix [batch*Np, P*P*C]. Each
    /// row is one patch in row-major grid order; within a row the layout is
    /// channel-major, then pixel rows.
    pub fn patch_pixel_matrix(&self, images: &[Tensor<E>]) -> Result<Tensor<E>> {
        let cfg = &self.config;
        let (c, hw) = (cfg.channels, cfg.image_size);
        let p = cfg.patch_size;
        let g = cfg.grid();
        if images.is_empty() {
            return Err(Error::Data("empty image batch".into()));
        }
        let mut data = Vec::with_capacity(images.len() * cfg.num_patches() * cfg.patch_dim());
        for img in images {
            if img.shape() != [c, hw, hw] {
                return Err(Error::Shape(format!(
                    "image shape {:?}, config wants [{c}, {hw}, {hw}]",
                    img.shape()
                )));
            }
            let px = img.data();
            for gy in 0..g {
                for gx in 0..g {
                    for ch in 0..c {
                        for dy in 0..p {
                            let y = gy * p + dy;
                            let row = &px[ch * hw * hw + y * hw + gx * p..];
                            data.extend_from_slice(&row[..p]);
                        }
                    }
                }
            }
        }
        Tensor::new(
            vec![images.len() * cfg.num_patches(), cfg.patch_dim()],
            data,
        )
    }

    /// Project patches and add position embeddings: [batch*Np, width].
    pub fn patchify(&self, tape: &mut Tape<E>, images: &[Tensor<E>]) -> Result<Var> {
        let mat = self.patch_pixel_matrix(images)?;
        let x = tape.constant(mat);
        self.patch_tokens(tape, x)
    }

    fn patch_tokens(&self, tape: &mut Tape<E>, patch_matrix: Var) -> Result<Var> {
        let w = self.params.bind(tape, "patch/proj_w")?;
        let b = self.params.bind(tape, "patch/proj_b")?;
        let pos = self.params.bind(tape, "patch/pos")?;
        let proj = tape.linear(patch_matrix, w, b)?;
        tape.add_tiled(proj, pos)
    }

    /// Full forward pass over a batch of images.
    pub fn forward(
        &self,
        tape: &mut Tape<E>,
        images: &[Tensor<E>],
        taps: &TapSpec,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<ForwardPass<E>> {
        let patches = self.patchify(tape, images)?;
        self.forward_from_patch_tokens(tape, patches, images.len(), taps, mode, rng, None)
    }

    /// Forward pass starting from already-projected patch tokens
    /// ([batch*Np, width]); `masked_rows`, when given, replaces those
    /// patch-token rows with the filler var before the blocks run (used by
    /// masked pretraining).
    #[allow(clippy::too_many_arguments)]
    pub fn forward_from_patch_tokens(
        &self,
        tape: &mut Tape<E>,
        patch_tokens: Var,
        batch: usize,
        taps: &TapSpec,
        mode: Mode,
        rng: &mut Rng,
        masked: Option<(&[usize], Var)>,
    ) -> Result<ForwardPass<E>> {
        let cfg = &self.config;
        taps.validate(cfg.depth)?;
        let mut x = patch_tokens;
        if let Some((rows, filler)) = masked {
            x = tape.replace_rows(x, rows.to_vec(), filler)?;
        }
        let cls = self.params.bind(tape, "token/cls")?;
        let regs = if cfg.registers > 0 {
            Some(self.params.bind(tape, "token/reg")?)
        } else {
            None
        };
        let mut seq = tape.prepend_tokens(x, cls, regs, batch)?;
        let t = cfg.tokens();
        let mut tap_vars = Vec::new();
        let mut attention = Vec::new();

        for i in 1..=cfg.depth {
            let p = block_prefix(i);
            let ln1_g = self.params.bind(tape, &format!("{p}ln1_g"))?;
            let ln1_b = self.params.bind(tape, &format!("{p}ln1_b"))?;
            let h1 = tape.layer_norm(seq, ln1_g, ln1_b, LAYER_NORM_EPS)?;
            let qkv_w = self.params.bind(tape, &format!("{p}qkv_w"))?;
            let qkv_b = self.params.bind(tape, &format!("{p}qkv_b"))?;
            let qkv = tape.linear(h1, qkv_w, qkv_b)?;
            let att = tape.multi_head_attention(qkv, batch, t, cfg.heads)?;
            if i == cfg.depth {
                attention = self.extract_attention(tape, att, i, batch);
            }
            let attn_w = self.params.bind(tape, &format!("{p}attn_w"))?;
            let attn_b = self.params.bind(tape, &format!("{p}attn_b"))?;
            let mut att = tape.linear(att, attn_w, attn_b)?;
            att = tape.dropout(att, cfg.dropout_rate, mode, rng)?;
            seq = tape.add(seq, att)?;

            let ln2_g = self.params.bind(tape, &format!("{p}ln2_g"))?;
            let ln2_b = self.params.bind(tape, &format!("{p}ln2_b"))?;
            let h2 = tape.layer_norm(seq, ln2_g, ln2_b, LAYER_NORM_EPS)?;
            let mlp1_w = self.params.bind(tape, &format!("{p}mlp1_w"))?;
            let mlp1_b = self.params.bind(tape, &format!("{p}mlp1_b"))?;
            let mlp2_w = self.params.bind(tape, &format!("{p}mlp2_w"))?;
            let mlp2_b = self.params.bind(tape, &format!("{p}mlp2_b"))?;
            let mut m = tape.linear(h2, mlp1_w, mlp1_b)?;
            m = tape.gelu(m);
            m = tape.linear(m, mlp2_w, mlp2_b)?;
            m = tape.dropout(m, cfg.dropout_rate, mode, rng)?;
            seq = tape.add(seq, m)?;

            if taps.contains(i) {
                tap_vars.push((i, seq));
            }
        }

        let fin_g = self.params.bind(tape, "final_norm/g")?;
        let fin_b = self.params.bind(tape, "final_norm/b")?;
        let tokens = tape.layer_norm(seq, fin_g, fin_b, LAYER_NORM_EPS)?;
        Ok(ForwardPass {
            tokens,
            pre_norm_tokens: seq,
            taps: tap_vars,
            attention,
            batch,
        })
    }

    fn extract_attention(
        &self,
        tape: &Tape<E>,
        att: Var,
        block_index: usize,
        batch: usize,
    ) -> Vec<AttentionRecord<E>> {
        let (weights, b, heads, tokens) = tape.attention_weights(att).expect("attention node");
        debug_assert_eq!(b, batch);
        let per = heads * tokens * tokens;
        (0..batch)
            .map(|s| AttentionRecord {
                block_index,
                heads,
                tokens,
                weights: weights[s * per..(s + 1) * per].to_vec(),
            })
            .collect()
    }

    /// Split a tapped [batch*T, width] var into per-sample feature records.
    pub fn split_features(
        &self,
        tape: &Tape<E>,
        tap: (usize, Var),
        batch: usize,
    ) -> Vec<BlockFeatures<E>> {
        let t = self.config.tokens();
        let d = self.config.width;
        let v = tape.value(tap.1);
        (0..batch)
            .map(|b| BlockFeatures {
                block_index: tap.0,
                tokens: Tensor::new(
                    vec![t, d],
                    v.data()[b * t * d..(b + 1) * t * d].to_vec(),
                )
                .expect("feature shape"),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn tiny_config() -> ViTConfig {
        ViTConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            depth: 2,
            width: 8,
            heads: 2,
            registers: 2,
            mlp_ratio: 2.0,
            dropout_rate: 0.0,
        }
    }

    #[test]
    fn token_layout_examples() {
        let cfg = ViTConfig {
            image_size: 28,
            patch_size: 14,
            registers: 4,
            ..ViTConfig::default()
        };
        let l = token_layout(&cfg);
        assert_eq!(l.tokens(), 9);
        assert_eq!(l.cls_row(), 0);
        assert_eq!(l.register_rows(), 1..5);
        assert_eq!(l.patch_rows(), 5..9);

        let no_regs = ViTConfig {
            registers: 0,
            ..cfg.clone()
        };
        assert!(token_layout(&no_regs).register_rows().is_empty());

        let cfg17 = ViTConfig {
            image_size: 28,
            patch_size: 7,
            registers: 0,
            ..ViTConfig::default()
        };
        assert_eq!(token_layout(&cfg17).tokens(), 17);
    }

    proptest! {
        #[test]
        fn token_count_formula_holds(grid in 1usize..6, patch in 1usize..8, regs in 0usize..5) {
            let cfg = ViTConfig {
                image_size: grid * patch,
                patch_size: patch,
                registers: regs,
                ..ViTConfig::default()
            };
            prop_assert!(cfg.validate().is_ok());
            prop_assert_eq!(cfg.tokens(), 1 + regs + grid * grid);
            let l = token_layout(&cfg);
            // disjoint index sets covering 0..T-1
            let mut seen = vec![false; cfg.tokens()];
            seen[l.cls_row()] = true;
            for r in l.register_rows().chain(l.patch_rows()) {
                prop_assert!(!seen[r]);
                seen[r] = true;
            }
            prop_assert!(seen.iter().all(|&b| b));
        }
    }

    #[test]
    fn config_validation_rejects_bad_geometry() {
        let mut cfg = ViTConfig::default();
        cfg.patch_size = 5; // 28 % 5 != 0
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = ViTConfig::default();
        cfg.heads = 3; // 64 % 3 != 0
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn patchify_produces_expected_token_count() {
        let cfg = ViTConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            depth: 1,
            width: 8,
            heads: 1,
            registers: 0,
            mlp_ratio: 2.0,
            dropout_rate: 0.0,
        };
        let bb = Backbone::<f32>::init(cfg, &Rng::seeded(1)).unwrap();
        let img = Tensor::<f32>::zeros(vec![1, 8, 8]);
        let mut tape = Tape::new();
        let v = bb.patchify(&mut tape, &[img]).unwrap();
        assert_eq!(tape.value(v).shape(), &[4, 8]);
    }

    #[test]
    fn zero_image_and_zero_bias_yields_position_embeddings() {
        let bb = Backbone::<f32>::init(tiny_config(), &Rng::seeded(2)).unwrap();
        let img = Tensor::<f32>::zeros(vec![1, 8, 8]);
        let mut tape = Tape::new();
        let v = bb.patchify(&mut tape, &[img]).unwrap();
        let pos = bb.params().get("patch/pos").unwrap();
        let got = tape.value(v);
        assert_eq!(got.shape(), pos.shape());
        for (a, b) in got.data().iter().zip(pos.data()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn patch_rows_match_brute_force_slicing() {
        let cfg = ViTConfig {
            image_size: 8,
            patch_size: 4,
            channels: 2,
            depth: 1,
            width: 8,
            heads: 1,
            registers: 0,
            mlp_ratio: 2.0,
            dropout_rate: 0.0,
        };
        let bb = Backbone::<f32>::init(cfg.clone(), &Rng::seeded(3)).unwrap();
        let mut rng = Rng::seeded(9);
        let px: Vec<f32> = (0..2 * 8 * 8).map(|_| rng.unit_f64() as f32).collect();
        let img = Tensor::<f32>::new(vec![2, 8, 8], px.clone()).unwrap();
        let mat = bb.patch_pixel_matrix(&[img]).unwrap();
        // brute-force: patch j at grid (gy,gx), entry order (ch, dy, dx)
        let g = 2;
        let p = 4;
        for gy in 0..g {
            for gx in 0..g {
                let row = gy * g + gx;
                let mut want = Vec::new();
                for ch in 0..2 {
                    for dy in 0..p {
                        for dx in 0..p {
                            want.push(px[ch * 64 + (gy * p + dy) * 8 + gx * p + dx]);
                        }
                    }
                }
                let got = &mat.data()[row * 32..(row + 1) * 32];
                assert_eq!(got, want.as_slice(), "patch row {row}");
            }
        }
    }

    #[test]
    fn image_shape_mismatch_is_shape_error() {
        let bb = Backbone::<f32>::init(tiny_config(), &Rng::seeded(4)).unwrap();
        let img = Tensor::<f32>::zeros(vec![1, 4, 4]);
        assert!(matches!(
            bb.patch_pixel_matrix(&[img]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn tap_spec_shapes_and_range_errors() {
        let bb = Backbone::<f32>::init(tiny_config(), &Rng::seeded(5)).unwrap();
        let img = Tensor::<f32>::zeros(vec![1, 8, 8]);
        let mut rng = Rng::seeded(0);

        // tap only the last block -> exactly one record with index depth
        let mut tape = Tape::new();
        let fwd = bb
            .forward(&mut tape, &[img.clone()], &TapSpec::of([2]), Mode::Eval, &mut rng)
            .unwrap();
        assert_eq!(fwd.taps.len(), 1);
        assert_eq!(fwd.taps[0].0, 2);

        // tap all blocks -> depth records, all [T, d] per sample
        let mut tape = Tape::new();
        let fwd = bb
            .forward(&mut tape, &[img.clone()], &TapSpec::of(1..=2), Mode::Eval, &mut rng)
            .unwrap();
        assert_eq!(fwd.taps.len(), 2);
        for &(i, v) in &fwd.taps {
            assert!(i >= 1 && i <= 2);
            assert_eq!(tape.value(v).shape(), &[7, 8]); // T = 1 + 2 + 4
        }

        // out-of-range tap -> configuration error
        let mut tape = Tape::new();
        assert!(matches!(
            bb.forward(&mut tape, &[img], &TapSpec::of([3]), Mode::Eval, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn parameter_names_enumerate_blocks_disjointly() {
        let bb = Backbone::<f32>::init(tiny_config(), &Rng::seeded(6)).unwrap();
        let names: Vec<&str> = bb.params().names().collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted, "names iterate lexicographically");
        for i in 1..=2 {
            let prefix = block_prefix(i);
            assert!(names.iter().filter(|n| n.starts_with(&prefix)).count() == 12);
        }
    }
}
