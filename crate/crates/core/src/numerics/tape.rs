//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Operations append nodes holding their output tensor plus whatever the
//! backward pass needs (dropout masks, layer-norm row statistics,
//! post-softmax attention weights). `backward` walks the tape in reverse,
//! accumulating gradients in f64 buffers, and returns gradients for the
//! trainable leaf parameters by name. Subgraphs without trainable leaves
//! are skipped entirely, which is what makes frozen backbones cheap.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::functional::{self, Mode};
use crate::numerics::kernels;
use crate::numerics::rng::Rng;
use crate::numerics::tensor::{Scalar, Tensor};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct Node<E: Scalar> {
    value: Tensor<E>,
    needs: bool,
    param: Option<String>,
    op: Op<E>,
}

enum Op<E: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    AddTiled(Var, Var),
    Matmul(Var, Var),
    Gelu(Var),
    RowSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mu: Vec<f64>,
        rstd: Vec<f64>,
    },
    Dropout {
        x: Var,
        keep_inv: f64,
        mask: Vec<bool>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ReplaceRows {
        x: Var,
        idx: Vec<usize>,
        filler: Var,
    },
    PrependTokens {
        patches: Var,
        cls: Var,
        regs: Option<Var>,
        batch: usize,
    },
    ConcatCols(Vec<Var>),
    WeightedCombine {
        feats: Vec<Var>,
        probs: Var,
    },
    Reshape(Var),
    MultiHeadAttention {
        qkv: Var,
        batch: usize,
        tokens: usize,
        heads: usize,
        attn: Vec<E>,
    },
    SumAll(Var),
    MeanAll(Var),
    BceMean {
        logits: Var,
        labels: Vec<f64>,
    },
    CrossEntropyMean {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    MseMean {
        pred: Var,
        target: Vec<f64>,
    },
}

/// Gradients keyed by parameter name, produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients<E: Scalar> {
    by_name: BTreeMap<String, Tensor<E>>,
}

impl<E: Scalar> Gradients<E> {
    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.by_name.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.by_name.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }
}

pub struct Tape<E: Scalar> {
    nodes: Vec<Node<E>>,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<E>, needs: bool, param: Option<String>, op: Op<E>) -> Var {
        self.nodes.push(Node {
            value,
            needs,
            param,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0].to_f64()
    }

    /// Insert a value the graph treats as a constant.
    pub fn constant(&mut self, t: Tensor<E>) -> Var {
        let t = t.with_trainable(false);
        self.push(t, false, None, Op::Leaf)
    }

    /// Insert a named parameter leaf. Gradients are produced for it iff the
    /// tensor is trainable.
    pub fn param(&mut self, name: &str, t: &Tensor<E>) -> Var {
        let needs = t.trainable();
        self.push(t.clone(), needs, Some(name.to_string()), Op::Leaf)
    }

    // ---- elementwise and shape ops -------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_values(a, b, |x, y| x + y);
        Ok(self.push(out, self.needs(a) || self.needs(b), None, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_values(a, b, |x, y| x - y);
        Ok(self.push(out, self.needs(a) || self.needs(b), None, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_values(a, b, |x, y| x * y);
        Ok(self.push(out, self.needs(a) || self.needs(b), None, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.nodes[x.0].value.clone();
        let data: Vec<E> = v.data().iter().map(|&e| E::from_f64(e.to_f64() * c)).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("scale shape");
        self.push(out, self.needs(x), None, Op::Scale(x, c))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        let want: usize = shape.iter().product();
        if want != v.numel() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {:?}",
                v.shape(),
                shape
            )));
        }
        let out = Tensor::new(shape, v.data().to_vec())?;
        Ok(self.push(out, self.needs(x), None, Op::Reshape(x)))
    }

    /// x: [r, c] plus a length-c bias broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(x);
        let bv = &self.nodes[bias.0].value;
        if bv.numel() != c {
            return Err(Error::Shape(format!(
                "add_bias: bias length {} vs {} columns",
                bv.numel(),
                c
            )));
        }
        let xv = self.nodes[x.0].value.data();
        let bd = bv.data();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(E::from_f64(xv[i * c + j].to_f64() + bd[j].to_f64()));
            }
        }
        let out = Tensor::new(self.nodes[x.0].value.shape().to_vec(), data)?;
        Ok(self.push(
            out,
            self.needs(x) || self.needs(bias),
            None,
            Op::AddBias(x, bias),
        ))
    }

    /// x: [t*r, c] plus p: [r, c] tiled vertically t times.
    pub fn add_tiled(&mut self, x: Var, p: Var) -> Result<Var> {
        let (xr, c) = self.matrix_dims(x);
        let (pr, pc) = self.matrix_dims(p);
        if pc != c || pr == 0 || xr % pr != 0 {
            return Err(Error::Shape(format!(
                "add_tiled: x [{xr},{c}] vs p [{pr},{pc}]"
            )));
        }
        let xv = self.nodes[x.0].value.data();
        let pv = self.nodes[p.0].value.data();
        let mut data = Vec::with_capacity(xr * c);
        for i in 0..xr {
            let pi = i % pr;
            for j in 0..c {
                data.push(E::from_f64(
                    xv[i * c + j].to_f64() + pv[pi * c + j].to_f64(),
                ));
            }
        }
        let out = Tensor::new(self.nodes[x.0].value.shape().to_vec(), data)?;
        Ok(self.push(
            out,
            self.needs(x) || self.needs(p),
            None,
            Op::AddTiled(x, p),
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.matrix_dims(a);
        let (kb, n) = self.matrix_dims(b);
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul: [{m},{ka}] x [{kb},{n}]"
            )));
        }
        let data = kernels::matmul_nn(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            m,
            ka,
            n,
        );
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(out, self.needs(a) || self.needs(b), None, Op::Matmul(a, b)))
    }

    /// matmul followed by a broadcast bias add.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let data: Vec<E> = v
            .data()
            .iter()
            .map(|&e| E::from_f64(functional::gelu(e.to_f64())))
            .collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("gelu shape");
        self.push(out, self.needs(x), None, Op::Gelu(x))
    }

    /// Row-wise stable softmax over the last dimension.
    pub fn row_softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(x);
        let xv = self.nodes[x.0].value.data();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row: Vec<f64> = xv[i * c..(i + 1) * c].iter().map(|v| v.to_f64()).collect();
            let sm = functional::softmax_vec(&row)?;
            data.extend(sm.into_iter().map(E::from_f64));
        }
        let out = Tensor::new(self.nodes[x.0].value.shape().to_vec(), data)?;
        Ok(self.push(out, self.needs(x), None, Op::RowSoftmax(x)))
    }

    /// Row-wise layer normalization with gain and bias of the row width.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config("layer_norm eps must be positive".into()));
        }
        let (r, c) = self.matrix_dims(x);
        if self.nodes[gain.0].value.numel() != c || self.nodes[bias.0].value.numel() != c {
            return Err(Error::Shape(format!(
                "layer_norm: gain/bias length vs {c} columns"
            )));
        }
        let xv = self.nodes[x.0].value.data();
        let gv = self.nodes[gain.0].value.data();
        let bv = self.nodes[bias.0].value.data();
        let mut mu = vec![0.0f64; r];
        let mut rstd = vec![0.0f64; r];
        let mut data = vec![E::from_f64(0.0); r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / c as f64;
            let var = row
                .iter()
                .map(|v| {
                    let d = v.to_f64() - mean;
                    d * d
                })
                .sum::<f64>()
                / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            mu[i] = mean;
            rstd[i] = rs;
            for j in 0..c {
                let xhat = (row[j].to_f64() - mean) * rs;
                data[i * c + j] = E::from_f64(gv[j].to_f64() * xhat + bv[j].to_f64());
            }
        }
        let out = Tensor::new(self.nodes[x.0].value.shape().to_vec(), data)?;
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            out,
            needs,
            None,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mu,
                rstd,
            },
        ))
    }

    /// Inverted dropout. Eval mode and rate 0 return the input var itself.
    pub fn dropout(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} not in [0,1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let v = &self.nodes[x.0].value;
        let keep_inv = 1.0 / (1.0 - rate);
        let mask = functional::dropout_mask(v.numel(), rate, rng);
        let data: Vec<E> = v
            .data()
            .iter()
            .zip(&mask)
            .map(|(&e, &keep)| {
                if keep {
                    E::from_f64(e.to_f64() * keep_inv)
                } else {
                    E::from_f64(0.0)
                }
            })
            .collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push(
            out,
            self.needs(x),
            None,
            Op::Dropout { x, keep_inv, mask },
        ))
    }

    /// Select rows of a matrix by index (indices may repeat).
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let (r, c) = self.matrix_dims(x);
        if idx.is_empty() {
            return Err(Error::Shape("gather_rows: empty index set".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Shape(format!(
                "gather_rows: row {bad} out of {r} rows"
            )));
        }
        let xv = self.nodes[x.0].value.data();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            data.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let out = Tensor::new(vec![idx.len(), c], data)?;
        Ok(self.push(out, self.needs(x), None, Op::GatherRows { x, idx }))
    }

    /// Copy x and overwrite the given rows with a single filler row.
    pub fn replace_rows(&mut self, x: Var, idx: Vec<usize>, filler: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(x);
        let fv = &self.nodes[filler.0].value;
        if fv.numel() != c {
            return Err(Error::Shape(format!(
                "replace_rows: filler length {} vs {c} columns",
                fv.numel()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Shape(format!(
                "replace_rows: row {bad} out of {r} rows"
            )));
        }
        let mut data = self.nodes[x.0].value.data().to_vec();
        let fd = fv.data();
        for &i in &idx {
            data[i * c..(i + 1) * c].copy_from_slice(fd);
        }
        let out = Tensor::new(self.nodes[x.0].value.shape().to_vec(), data)?;
        let needs = self.needs(x) || self.needs(filler);
        Ok(self.push(out, needs, None, Op::ReplaceRows { x, idx, filler }))
    }

    /// Build per-sample token matrices: row 0 is the CLS embedding, the next
    /// R rows the register embeddings, then that sample's patch rows.
    pub fn prepend_tokens(
        &mut self,
        patches: Var,
        cls: Var,
        regs: Option<Var>,
        batch: usize,
    ) -> Result<Var> {
        let (pr, c) = self.matrix_dims(patches);
        if batch == 0 || pr % batch != 0 {
            return Err(Error::Shape(format!(
                "prepend_tokens: {pr} patch rows not divisible by batch {batch}"
            )));
        }
        let np = pr / batch;
        let cv = &self.nodes[cls.0].value;
        if cv.numel() != c {
            return Err(Error::Shape("prepend_tokens: cls width mismatch".into()));
        }
        let nreg = match regs {
            Some(rv) => {
                let (rr, rc) = self.matrix_dims(rv);
                if rc != c {
                    return Err(Error::Shape("prepend_tokens: register width mismatch".into()));
                }
                rr
            }
            None => 0,
        };
        let t = 1 + nreg + np;
        let pv = self.nodes[patches.0].value.data();
        let cd = self.nodes[cls.0].value.data().to_vec();
        let rd: Vec<E> = regs
            .map(|rv| self.nodes[rv.0].value.data().to_vec())
            .unwrap_or_default();
        let mut data = Vec::with_capacity(batch * t * c);
        for b in 0..batch {
            data.extend_from_slice(&cd);
            data.extend_from_slice(&rd);
            data.extend_from_slice(&pv[b * np * c..(b + 1) * np * c]);
        }
        let out = Tensor::new(vec![batch * t, c], data)?;
        let needs = self.needs(patches)
            || self.needs(cls)
            || regs.map(|r| self.needs(r)).unwrap_or(false);
        Ok(self.push(
            out,
            needs,
            None,
            Op::PrependTokens {
                patches,
                cls,
                regs,
                batch,
            },
        ))
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols of nothing".into()));
        }
        let (r, _) = self.matrix_dims(parts[0]);
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (pr, pc) = self.matrix_dims(p);
                if pr != r {
                    return Err(Error::Shape(format!(
                        "concat_cols: row counts {pr} vs {r}"
                    )));
                }
                Ok(pc)
            })
            .collect::<Result<_>>()?;
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                let pv = self.nodes[p.0].value.data();
                data.extend_from_slice(&pv[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::new(vec![r, total], data)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, needs, None, Op::ConcatCols(parts.to_vec())))
    }

    /// Sum of same-shape features weighted by a probability vector of the
    /// same length as `feats`.
    pub fn weighted_combine(&mut self, feats: &[Var], probs: Var) -> Result<Var> {
        if feats.is_empty() {
            return Err(Error::Shape("weighted_combine of nothing".into()));
        }
        let pv = &self.nodes[probs.0].value;
        if pv.numel() != feats.len() {
            return Err(Error::Contract(format!(
                "weighted_combine: {} weights for {} features",
                pv.numel(),
                feats.len()
            )));
        }
        let shape = self.nodes[feats[0].0].value.shape().to_vec();
        for &f in feats {
            if self.nodes[f.0].value.shape() != shape.as_slice() {
                return Err(Error::Shape("weighted_combine: feature shape mismatch".into()));
            }
        }
        let n = self.nodes[feats[0].0].value.numel();
        let weights: Vec<f64> = pv.data().iter().map(|v| v.to_f64()).collect();
        let mut acc = vec![0.0f64; n];
        for (&f, &w) in feats.iter().zip(&weights) {
            for (a, &v) in acc.iter_mut().zip(self.nodes[f.0].value.data()) {
                *a += w * v.to_f64();
            }
        }
        let out = Tensor::new(shape, acc.into_iter().map(E::from_f64).collect())?;
        let needs = feats.iter().any(|&f| self.needs(f)) || self.needs(probs);
        Ok(self.push(
            out,
            needs,
            None,
            Op::WeightedCombine {
                feats: feats.to_vec(),
                probs,
            },
        ))
    }

    /// Fused multi-head self-attention over packed per-sample token blocks.
    ///
    /// `qkv` is [batch*tokens, 3*width] with column thirds Q | K | V; head h
    /// occupies the h-th `width/heads` column slice of each third. Returns
    /// [batch*tokens, width]; the post-softmax weights ([batch, heads,
    /// tokens, tokens]) are retrievable via [`Tape::attention_weights`].
    pub fn multi_head_attention(
        &mut self,
        qkv: Var,
        batch: usize,
        tokens: usize,
        heads: usize,
    ) -> Result<Var> {
        let (rows, c3) = self.matrix_dims(qkv);
        if rows != batch * tokens {
            return Err(Error::Shape(format!(
                "attention: {rows} rows vs batch {batch} x tokens {tokens}"
            )));
        }
        if c3 % 3 != 0 {
            return Err(Error::Shape("attention: qkv width not divisible by 3".into()));
        }
        let width = c3 / 3;
        if heads == 0 || width % heads != 0 {
            return Err(Error::Shape(format!(
                "attention: width {width} not divisible by {heads} heads"
            )));
        }
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = self.nodes[qkv.0].value.data();

        let per_sample = |b: usize| -> (Vec<E>, Vec<E>) {
            let base = b * tokens;
            let mut out = vec![E::from_f64(0.0); tokens * width];
            let mut attn = vec![E::from_f64(0.0); heads * tokens * tokens];
            for h in 0..heads {
                let qo = h * dh;
                let ko = width + h * dh;
                let vo = 2 * width + h * dh;
                for t1 in 0..tokens {
                    let qrow = &qv[(base + t1) * c3 + qo..(base + t1) * c3 + qo + dh];
                    let mut scores = vec![0.0f64; tokens];
                    for (t2, s) in scores.iter_mut().enumerate() {
                        let krow = &qv[(base + t2) * c3 + ko..(base + t2) * c3 + ko + dh];
                        let mut acc = 0.0f64;
                        for (&q, &k) in qrow.iter().zip(krow) {
                            acc += q.to_f64() * k.to_f64();
                        }
                        *s = acc * scale;
                    }
                    let probs = functional::softmax_vec(&scores).expect("finite scores");
                    let mut acc = vec![0.0f64; dh];
                    for (t2, &p) in probs.iter().enumerate() {
                        attn[h * tokens * tokens + t1 * tokens + t2] = E::from_f64(p);
                        let vrow = &qv[(base + t2) * c3 + vo..(base + t2) * c3 + vo + dh];
                        for (a, &v) in acc.iter_mut().zip(vrow) {
                            *a += p * v.to_f64();
                        }
                    }
                    for (j, &a) in acc.iter().enumerate() {
                        out[t1 * width + qo + j] = E::from_f64(a);
                    }
                }
            }
            (out, attn)
        };

        let results = kernels_map(batch, tokens * tokens * width, per_sample);
        let mut out = Vec::with_capacity(batch * tokens * width);
        let mut attn = Vec::with_capacity(batch * heads * tokens * tokens);
        for (o, a) in results {
            out.extend(o);
            attn.extend(a);
        }
        let value = Tensor::new(vec![batch * tokens, width], out)?;
        Ok(self.push(
            value,
            self.needs(qkv),
            None,
            Op::MultiHeadAttention {
                qkv,
                batch,
                tokens,
                heads,
                attn,
            },
        ))
    }

    /// Post-softmax attention weights of an attention node, shaped
    /// [batch, heads, tokens, tokens].
    pub fn attention_weights(&self, v: Var) -> Option<(&[E], usize, usize, usize)> {
        match &self.nodes[v.0].op {
            Op::MultiHeadAttention {
                attn,
                batch,
                tokens,
                heads,
                ..
            } => Some((attn.as_slice(), *batch, *heads, *tokens)),
            _ => None,
        }
    }

    // ---- reductions and losses -----------------------------------------

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = kernels::sum_all(self.nodes[x.0].value.data());
        let out = Tensor::scalar(s);
        self.push(out, self.needs(x), None, Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.numel();
        let s = kernels::sum_all(self.nodes[x.0].value.data()) / n as f64;
        let out = Tensor::scalar(s);
        self.push(out, self.needs(x), None, Op::MeanAll(x))
    }

    /// Mean binary cross-entropy over logits (one per sample).
    pub fn bce_mean(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let v = &self.nodes[logits.0].value;
        if v.numel() != labels.len() {
            return Err(Error::Shape(format!(
                "bce_mean: {} logits vs {} labels",
                v.numel(),
                labels.len()
            )));
        }
        let mut acc = 0.0f64;
        for (&x, &y) in v.data().iter().zip(labels) {
            acc += functional::bce_with_logit(x.to_f64(), y);
        }
        let loss = acc / labels.len() as f64;
        let out = Tensor::scalar(loss);
        Ok(self.push(
            out,
            self.needs(logits),
            None,
            Op::BceMean {
                logits,
                labels: labels.iter().map(|&y| y as f64).collect(),
            },
        ))
    }

    /// Mean cross-entropy over [batch, classes] logits.
    pub fn cross_entropy_mean(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix_dims(logits);
        if r != labels.len() {
            return Err(Error::Shape(format!(
                "cross_entropy: {r} rows vs {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::InvalidValue(format!(
                "cross_entropy: label {bad} out of {c} classes"
            )));
        }
        let xv = self.nodes[logits.0].value.data();
        let mut probs = vec![0.0f64; r * c];
        let mut acc = 0.0f64;
        for i in 0..r {
            let row: Vec<f64> = xv[i * c..(i + 1) * c].iter().map(|v| v.to_f64()).collect();
            let sm = functional::softmax_vec(&row)?;
            acc -= sm[labels[i]].max(1e-300).ln();
            probs[i * c..(i + 1) * c].copy_from_slice(&sm);
        }
        let out = Tensor::scalar(acc / r as f64);
        Ok(self.push(
            out,
            self.needs(logits),
            None,
            Op::CrossEntropyMean {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Mean squared error against a constant target of the same size.
    pub fn mse_mean(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let v = &self.nodes[pred.0].value;
        if v.numel() != target.len() {
            return Err(Error::Shape(format!(
                "mse_mean: {} predictions vs {} targets",
                v.numel(),
                target.len()
            )));
        }
        let mut acc = 0.0f64;
        for (&p, &t) in v.data().iter().zip(target) {
            let d = p.to_f64() - t;
            acc += d * d;
        }
        let out = Tensor::scalar(acc / target.len() as f64);
        Ok(self.push(
            out,
            self.needs(pred),
            None,
            Op::MseMean {
                pred,
                target: target.to_vec(),
            },
        ))
    }

    // ---- backward ------------------------------------------------------

    /// Reverse pass from a scalar loss. Returns gradients for every
    /// trainable named leaf that the loss reaches.
    pub fn backward(&self, loss: Var) -> Result<Gradients<E>> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs {
                continue;
            }
            let dy = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(id, &dy, &mut grads);
            if self.nodes[id].param.is_some() {
                grads[id] = Some(dy);
            }
        }

        let mut by_name = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let (Some(name), true) = (&node.param, node.needs) {
                if let Some(g) = &grads[id] {
                    let t = Tensor::from_f64s(node.value.shape().to_vec(), g)?;
                    by_name.insert(name.clone(), t);
                }
            }
        }
        Ok(Gradients { by_name })
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], v: Var, contribution: &[f64]) {
        if !self.nodes[v.0].needs {
            return;
        }
        let slot = grads[v.0]
            .get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        for (g, &c) in slot.iter_mut().zip(contribution) {
            *g += c;
        }
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_node(&self, id: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, dy);
                self.accum(grads, *b, dy);
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, dy);
                if self.nodes[b.0].needs {
                    let neg: Vec<f64> = dy.iter().map(|v| -v).collect();
                    self.accum(grads, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].needs {
                    let bv = self.nodes[b.0].value.data();
                    let da: Vec<f64> = dy.iter().zip(bv).map(|(&d, &v)| d * v.to_f64()).collect();
                    self.accum(grads, *a, &da);
                }
                if self.nodes[b.0].needs {
                    let av = self.nodes[a.0].value.data();
                    let db: Vec<f64> = dy.iter().zip(av).map(|(&d, &v)| d * v.to_f64()).collect();
                    self.accum(grads, *b, &db);
                }
            }
            Op::Scale(x, c) => {
                let dx: Vec<f64> = dy.iter().map(|v| v * c).collect();
                self.accum(grads, *x, &dx);
            }
            Op::Reshape(x) => self.accum(grads, *x, dy),
            Op::AddBias(x, bias) => {
                self.accum(grads, *x, dy);
                if self.nodes[bias.0].needs {
                    let c = self.nodes[bias.0].value.numel();
                    let mut db = vec![0.0f64; c];
                    for (i, &d) in dy.iter().enumerate() {
                        db[i % c] += d;
                    }
                    self.accum(grads, *bias, &db);
                }
            }
            Op::AddTiled(x, p) => {
                self.accum(grads, *x, dy);
                if self.nodes[p.0].needs {
                    let pn = self.nodes[p.0].value.numel();
                    let mut dp = vec![0.0f64; pn];
                    for (i, &d) in dy.iter().enumerate() {
                        dp[i % pn] += d;
                    }
                    self.accum(grads, *p, &dp);
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = self.matrix_dims(*a);
                let (_, n) = self.matrix_dims(*b);
                let dye: Vec<E> = dy.iter().map(|&v| E::from_f64(v)).collect();
                if self.nodes[a.0].needs {
                    let da =
                        kernels::matmul_nt(&dye, self.nodes[b.0].value.data(), m, n, k);
                    let da64: Vec<f64> = da.iter().map(|v| v.to_f64()).collect();
                    self.accum(grads, *a, &da64);
                }
                if self.nodes[b.0].needs {
                    let db =
                        kernels::matmul_tn(self.nodes[a.0].value.data(), &dye, m, k, n);
                    let db64: Vec<f64> = db.iter().map(|v| v.to_f64()).collect();
                    self.accum(grads, *b, &db64);
                }
            }
            Op::Gelu(x) => {
                let xv = self.nodes[x.0].value.data();
                let dx: Vec<f64> = dy
                    .iter()
                    .zip(xv)
                    .map(|(&d, &v)| d * functional::gelu_derivative(v.to_f64()))
                    .collect();
                self.accum(grads, *x, &dx);
            }
            Op::RowSoftmax(x) => {
                let (r, c) = self.matrix_dims(*x);
                let yv = self.nodes[id].value.data();
                let mut dx = vec![0.0f64; r * c];
                for i in 0..r {
                    let y = &yv[i * c..(i + 1) * c];
                    let d = &dy[i * c..(i + 1) * c];
                    let s: f64 = y.iter().zip(d).map(|(&yi, &di)| yi.to_f64() * di).sum();
                    for j in 0..c {
                        dx[i * c + j] = y[j].to_f64() * (d[j] - s);
                    }
                }
                self.accum(grads, *x, &dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mu,
                rstd,
            } => {
                let (r, c) = self.matrix_dims(*x);
                let xv = self.nodes[x.0].value.data();
                let gv = self.nodes[gain.0].value.data();
                let mut dx = vec![0.0f64; r * c];
                let mut dg = vec![0.0f64; c];
                let mut db = vec![0.0f64; c];
                for i in 0..r {
                    let xrow = &xv[i * c..(i + 1) * c];
                    let drow = &dy[i * c..(i + 1) * c];
                    let mut m1 = 0.0f64;
                    let mut m2 = 0.0f64;
                    for j in 0..c {
                        let xhat = (xrow[j].to_f64() - mu[i]) * rstd[i];
                        let dyh = drow[j] * gv[j].to_f64();
                        m1 += dyh;
                        m2 += dyh * xhat;
                        dg[j] += drow[j] * xhat;
                        db[j] += drow[j];
                    }
                    m1 /= c as f64;
                    m2 /= c as f64;
                    for j in 0..c {
                        let xhat = (xrow[j].to_f64() - mu[i]) * rstd[i];
                        let dyh = drow[j] * gv[j].to_f64();
                        dx[i * c + j] = rstd[i] * (dyh - m1 - xhat * m2);
                    }
                }
                self.accum(grads, *x, &dx);
                self.accum(grads, *gain, &dg);
                self.accum(grads, *bias, &db);
            }
            Op::Dropout { x, keep_inv, mask } => {
                let dx: Vec<f64> = dy
                    .iter()
                    .zip(mask)
                    .map(|(&d, &keep)| if keep { d * keep_inv } else { 0.0 })
                    .collect();
                self.accum(grads, *x, &dx);
            }
            Op::GatherRows { x, idx } => {
                let (_, c) = self.matrix_dims(*x);
                let mut dx = vec![0.0f64; self.nodes[x.0].value.numel()];
                for (out_i, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        dx[src * c + j] += dy[out_i * c + j];
                    }
                }
                self.accum(grads, *x, &dx);
            }
            Op::ReplaceRows { x, idx, filler } => {
                let (_, c) = self.matrix_dims(*x);
                if self.nodes[x.0].needs {
                    let mut dx = dy.to_vec();
                    for &i in idx {
                        for v in &mut dx[i * c..(i + 1) * c] {
                            *v = 0.0;
                        }
                    }
                    self.accum(grads, *x, &dx);
                }
                if self.nodes[filler.0].needs {
                    let mut df = vec![0.0f64; c];
                    for &i in idx {
                        for j in 0..c {
                            df[j] += dy[i * c + j];
                        }
                    }
                    self.accum(grads, *filler, &df);
                }
            }
            Op::PrependTokens {
                patches,
                cls,
                regs,
                batch,
            } => {
                let (pr, c) = self.matrix_dims(*patches);
                let np = pr / batch;
                let nreg = regs
                    .map(|r| self.nodes[r.0].value.rows())
                    .unwrap_or(0);
                let t = 1 + nreg + np;
                if self.nodes[cls.0].needs {
                    let mut dc = vec![0.0f64; c];
                    for b in 0..*batch {
                        for j in 0..c {
                            dc[j] += dy[(b * t) * c + j];
                        }
                    }
                    self.accum(grads, *cls, &dc);
                }
                if let Some(rv) = regs {
                    if self.nodes[rv.0].needs {
                        let mut dr = vec![0.0f64; nreg * c];
                        for b in 0..*batch {
                            for k in 0..nreg {
                                for j in 0..c {
                                    dr[k * c + j] += dy[(b * t + 1 + k) * c + j];
                                }
                            }
                        }
                        self.accum(grads, *rv, &dr);
                    }
                }
                if self.nodes[patches.0].needs {
                    let mut dp = vec![0.0f64; pr * c];
                    for b in 0..*batch {
                        let src = (b * t + 1 + nreg) * c;
                        let dst = b * np * c;
                        dp[dst..dst + np * c].copy_from_slice(&dy[src..src + np * c]);
                    }
                    self.accum(grads, *patches, &dp);
                }
            }
            Op::ConcatCols(parts) => {
                let r = self.nodes[parts[0].0].value.rows();
                let mut offset = 0usize;
                let total: usize = parts
                    .iter()
                    .map(|&p| self.nodes[p.0].value.cols())
                    .sum();
                for &p in parts {
                    let w = self.nodes[p.0].value.cols();
                    if self.nodes[p.0].needs {
                        let mut dp = vec![0.0f64; r * w];
                        for i in 0..r {
                            dp[i * w..(i + 1) * w]
                                .copy_from_slice(&dy[i * total + offset..i * total + offset + w]);
                        }
                        self.accum(grads, p, &dp);
                    }
                    offset += w;
                }
            }
            Op::WeightedCombine { feats, probs } => {
                let pv = self.nodes[probs.0].value.data();
                for (i, &f) in feats.iter().enumerate() {
                    if self.nodes[f.0].needs {
                        let w = pv[i].to_f64();
                        let df: Vec<f64> = dy.iter().map(|&d| d * w).collect();
                        self.accum(grads, f, &df);
                    }
                }
                if self.nodes[probs.0].needs {
                    let mut dp = vec![0.0f64; feats.len()];
                    for (i, &f) in feats.iter().enumerate() {
                        let fv = self.nodes[f.0].value.data();
                        dp[i] = dy.iter().zip(fv).map(|(&d, &v)| d * v.to_f64()).sum();
                    }
                    self.accum(grads, *probs, &dp);
                }
            }
            Op::MultiHeadAttention {
                qkv,
                batch,
                tokens,
                heads,
                attn,
            } => {
                let (_, c3) = self.matrix_dims(*qkv);
                let width = c3 / 3;
                let dh = width / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let qv = self.nodes[qkv.0].value.data();
                let t = *tokens;

                let per_sample = |b: usize| -> Vec<f64> {
                    let base = b * t;
                    let mut dqkv = vec![0.0f64; t * c3];
                    for h in 0..*heads {
                        let qo = h * dh;
                        let ko = width + h * dh;
                        let vo = 2 * width + h * dh;
                        let a_base = (b * heads + h) * t * t;
                        // dV and dA
                        let mut da = vec![0.0f64; t * t];
                        for t1 in 0..t {
                            let dout = &dy[(base + t1) * width + qo..(base + t1) * width + qo + dh];
                            for t2 in 0..t {
                                let p = attn[a_base + t1 * t + t2].to_f64();
                                let vrow =
                                    &qv[(base + t2) * c3 + vo..(base + t2) * c3 + vo + dh];
                                let mut dot = 0.0f64;
                                for (j, &d) in dout.iter().enumerate() {
                                    dqkv[t2 * c3 + vo + j] += p * d;
                                    dot += d * vrow[j].to_f64();
                                }
                                da[t1 * t + t2] = dot;
                            }
                        }
                        // dS through the softmax, then dQ and dK
                        for t1 in 0..t {
                            let mut srow = vec![0.0f64; t];
                            let mut inner = 0.0f64;
                            for t2 in 0..t {
                                inner += da[t1 * t + t2] * attn[a_base + t1 * t + t2].to_f64();
                            }
                            for t2 in 0..t {
                                let p = attn[a_base + t1 * t + t2].to_f64();
                                srow[t2] = p * (da[t1 * t + t2] - inner) * scale;
                            }
                            for t2 in 0..t {
                                let krow =
                                    &qv[(base + t2) * c3 + ko..(base + t2) * c3 + ko + dh];
                                let qrow =
                                    &qv[(base + t1) * c3 + qo..(base + t1) * c3 + qo + dh];
                                let ds = srow[t2];
                                for j in 0..dh {
                                    dqkv[t1 * c3 + qo + j] += ds * krow[j].to_f64();
                                    dqkv[t2 * c3 + ko + j] += ds * qrow[j].to_f64();
                                }
                            }
                        }
                    }
                    dqkv
                };

                let chunks = kernels_map(*batch, t * t * width, per_sample);
                let mut dq = Vec::with_capacity(batch * t * c3);
                for chunk in chunks {
                    dq.extend(chunk);
                }
                self.accum(grads, *qkv, &dq);
            }
            Op::SumAll(x) => {
                let n = self.nodes[x.0].value.numel();
                let dx = vec![dy[0]; n];
                self.accum(grads, *x, &dx);
            }
            Op::MeanAll(x) => {
                let n = self.nodes[x.0].value.numel();
                let dx = vec![dy[0] / n as f64; n];
                self.accum(grads, *x, &dx);
            }
            Op::BceMean { logits, labels } => {
                let xv = self.nodes[logits.0].value.data();
                let n = labels.len() as f64;
                let dx: Vec<f64> = xv
                    .iter()
                    .zip(labels)
                    .map(|(&x, &y)| dy[0] * (functional::sigmoid(x.to_f64()) - y) / n)
                    .collect();
                self.accum(grads, *logits, &dx);
            }
            Op::CrossEntropyMean {
                logits,
                labels,
                probs,
            } => {
                let (r, c) = self.matrix_dims(*logits);
                let mut dx = vec![0.0f64; r * c];
                for i in 0..r {
                    for j in 0..c {
                        let onehot = if labels[i] == j { 1.0 } else { 0.0 };
                        dx[i * c + j] = dy[0] * (probs[i * c + j] - onehot) / r as f64;
                    }
                }
                self.accum(grads, *logits, &dx);
            }
            Op::MseMean { pred, target } => {
                let pv = self.nodes[pred.0].value.data();
                let n = target.len() as f64;
                let dx: Vec<f64> = pv
                    .iter()
                    .zip(target)
                    .map(|(&p, &t)| dy[0] * 2.0 * (p.to_f64() - t) / n)
                    .collect();
                self.accum(grads, *pred, &dx);
            }
        }
    }

    // ---- helpers ---------------------------------------------------------

    fn matrix_dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let sa = self.nodes[a.0].value.shape();
        let sb = self.nodes[b.0].value.shape();
        if sa != sb {
            return Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_values(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor<E> {
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let data: Vec<E> = av
            .iter()
            .zip(bv)
            .map(|(&x, &y)| E::from_f64(f(x.to_f64(), y.to_f64())))
            .collect();
        Tensor::new(self.nodes[a.0].value.shape().to_vec(), data).expect("zip shape")
    }
}

/// Map an index range to per-item results, in parallel when the feature is
/// on and the work is heavy enough. Order of results is always the index
/// order, so outputs are identical either way.
fn kernels_map<T, F>(n: usize, work_per_item: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if n > 1 && n * work_per_item >= 16 * 1024 {
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    let _ = work_per_item;
    (0..n).map(f).collect()
}
