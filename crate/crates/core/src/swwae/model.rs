//! Model assembly, forward pass with loss breakdown, and the hand-rolled
//! reverse pass.
//!
//! Layer order inside an encoder stage is conv -> batchnorm -> ReLU ->
//! dropout, repeated per conv, with the stage's pool last. The head applies
//! dropout -> fc (-> ReLU between stacked fc layers). The decoder mirrors
//! the conv/pool prefix: unpool layers consume the what flowing down plus
//! the lateral where from the matching encoder pool; decoder convs use ReLU
//! except the one that produces the reconstruction (targets may be
//! negative after standardization).
//!
//! Stage m of the encoder is a maximal run of non-pool layers plus its
//! trailing pool. The intermediate loss pairs the *input* of encoder stage
//! m with the output of the decoder segment that mirrors it -- the two
//! activations that meet across the lateral connection -- summing
//! per-element-mean L2 terms over stages m >= 2, while stage 1's pair is
//! the input reconstruction loss.

use crate::archdsl::{mirror_decoder, propagate_shapes, ArchSpec, DecoderLayerSpec, LayerSpec};
use crate::error::{Error, Result};
use crate::nn::{
    l2_loss, relu, relu_backward, softmax_nll, BatchNorm, ConvLayer, Dropout, FcLayer, Mode, Param,
};
use crate::pooling::{
    hard_pool, hard_pool_backward, hard_unpool, hard_unpool_backward, soft_pool,
    soft_pool_backward, soft_unpool, soft_unpool_backward, upsample, upsample_backward, PoolMode,
    PoolOutput, WhereMap,
};
use crate::rng::{self, STREAM_DECODER_INIT, STREAM_ENCODER_INIT};
use crate::swwae::{LossBreakdown, Modality, SwwaeConfig};
use crate::tensor::Tensor;
use rand::Rng;

pub(crate) struct ConvBlock {
    pub conv: ConvLayer,
    pub bn: Option<BatchNorm>,
    pub dropout: Dropout,
}

pub(crate) enum EncLayer {
    Conv(ConvBlock),
    Pool { size: usize },
}

pub(crate) struct HeadLayer {
    pub dropout: Dropout,
    pub fc: FcLayer,
    pub relu_after: bool,
}

pub(crate) struct DecConvBlock {
    pub conv: ConvLayer,
    pub bn: Option<BatchNorm>,
    /// The conv that emits the reconstruction: no ReLU, no batchnorm.
    pub last: bool,
}

pub(crate) enum DecLayer {
    Unpool { size: usize },
    Conv(DecConvBlock),
}

/// How decoder unpooling fills its regions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LateralKind {
    /// True unpooling: place the what according to the encoder's where.
    Where,
    /// Baseline: replicate the what over the whole region.
    Upsample,
}

pub(crate) enum EncTrace {
    Conv { input: Tensor, pre_relu: Tensor },
    Pool { input: Tensor, out: PoolOutput },
}

impl EncTrace {
    fn input(&self) -> &Tensor {
        match self {
            EncTrace::Conv { input, .. } => input,
            EncTrace::Pool { input, .. } => input,
        }
    }
}

pub(crate) struct HeadTrace {
    fc_input: Tensor,
    pre_relu: Option<Tensor>,
}

pub(crate) enum DecLayerTrace {
    Unpool {
        used: Option<PoolOutput>,
        enc_index: usize,
        kind: LateralKind,
    },
    Conv {
        input: Tensor,
        pre_relu: Option<Tensor>,
    },
}

pub(crate) struct DecTrace {
    layers: Vec<DecLayerTrace>,
    /// Decoder activation at each interior stage boundary, indexed by
    /// decoder layer; `Some` where the output pairs with an encoder stage
    /// input (stages m >= 2).
    taps: Vec<Option<Tensor>>,
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardTrace {
    pub(crate) input: Tensor,
    pub(crate) enc: Vec<EncTrace>,
    prefix_shape: Vec<usize>,
    pub(crate) head: Vec<HeadTrace>,
    pub logits: Option<Tensor>,
    /// NLL gradient at the logits before lambda weighting.
    grad_logits: Option<Tensor>,
    pub(crate) dec: Option<DecTrace>,
    pub recon: Option<Tensor>,
}

pub struct SwwaeModel {
    arch: ArchSpec,
    input_shape: (usize, usize, usize),
    config: SwwaeConfig,
    modality: Modality,
    enc: Vec<EncLayer>,
    head: Vec<HeadLayer>,
    dec: Option<Vec<DecLayer>>,
    /// Encoder prefix layer indices where a stage begins.
    stage_starts: Vec<usize>,
    frozen_encoder: bool,
}

impl SwwaeModel {
    /// Build a model for `arch` on `channels x height x width` inputs.
    /// Encoder and head weights draw from one seeded stream, decoder
    /// weights from another, so a model without a decoder gets the exact
    /// same encoder/head initialization for the same seed.
    pub fn new(
        arch: &ArchSpec,
        channels: usize,
        height: usize,
        width: usize,
        config: SwwaeConfig,
        with_decoder: bool,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let shapes = propagate_shapes(arch.layers(), channels, height, width)?;
        let prefix = arch.conv_pool_prefix();
        if with_decoder && prefix.is_empty() {
            return Err(Error::invalid(
                "architecture has no conv/pool prefix to mirror into a decoder",
            ));
        }

        let mut enc_rng = rng::stream(seed, STREAM_ENCODER_INIT);
        let mut enc = Vec::with_capacity(prefix.len());
        let mut in_ch = channels;
        for layer in prefix {
            match layer {
                LayerSpec::Conv { maps, kernel } => {
                    let conv = ConvLayer::new(in_ch, *maps, *kernel, &mut enc_rng)?;
                    let bn = if config.batchnorm {
                        Some(BatchNorm::new(*maps)?)
                    } else {
                        None
                    };
                    enc.push(EncLayer::Conv(ConvBlock {
                        conv,
                        bn,
                        dropout: Dropout::new(config.conv_dropout)?,
                    }));
                    in_ch = *maps;
                }
                LayerSpec::Pool { size } => enc.push(EncLayer::Pool { size: *size }),
                LayerSpec::Fc { .. } => unreachable!("fc excluded from prefix"),
            }
        }

        let (pc, ph, pw) = if prefix.is_empty() {
            (channels, height, width)
        } else {
            shapes[prefix.len() - 1]
        };
        let mut head = Vec::new();
        let fc_specs = arch.fc_suffix();
        let mut dim = pc * ph * pw;
        for (i, layer) in fc_specs.iter().enumerate() {
            let LayerSpec::Fc { units } = layer else {
                unreachable!("suffix is fc-only")
            };
            head.push(HeadLayer {
                dropout: Dropout::new(config.dropout)?,
                fc: FcLayer::new(dim, *units, &mut enc_rng)?,
                relu_after: i + 1 < fc_specs.len(),
            });
            dim = *units;
        }

        let dec = if with_decoder {
            let mut dec_rng = rng::stream(seed, STREAM_DECODER_INIT);
            let specs = mirror_decoder(arch.layers(), channels);
            let last_conv = specs
                .iter()
                .rposition(|d| matches!(d, DecoderLayerSpec::Conv { .. }));
            let mut cur = pc;
            let mut layers = Vec::with_capacity(specs.len());
            for (j, spec) in specs.iter().enumerate() {
                match spec {
                    DecoderLayerSpec::Unpool { size } => {
                        layers.push(DecLayer::Unpool { size: *size })
                    }
                    DecoderLayerSpec::Conv { out_maps, kernel } => {
                        let last = Some(j) == last_conv;
                        let conv = ConvLayer::new(cur, *out_maps, *kernel, &mut dec_rng)?;
                        let bn = if config.decoder_batchnorm && !last {
                            Some(BatchNorm::new(*out_maps)?)
                        } else {
                            None
                        };
                        layers.push(DecLayer::Conv(DecConvBlock { conv, bn, last }));
                        cur = *out_maps;
                    }
                }
            }
            Some(layers)
        } else {
            None
        };

        let mut stage_starts = Vec::new();
        for i in 0..prefix.len() {
            if i == 0 || matches!(prefix[i - 1], LayerSpec::Pool { .. }) {
                stage_starts.push(i);
            }
        }

        Ok(SwwaeModel {
            arch: arch.clone(),
            input_shape: (channels, height, width),
            config,
            modality: Modality::Semi,
            enc,
            head,
            dec,
            stage_starts,
            frozen_encoder: false,
        })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn config(&self) -> &SwwaeConfig {
        &self.config
    }

    pub fn has_decoder(&self) -> bool {
        self.dec.is_some()
    }

    pub fn has_head(&self) -> bool {
        !self.head.is_empty()
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    /// Select which loss terms are live and return the effective config.
    /// Configured weights are retained; switching back restores them.
    pub fn set_modality(&mut self, modality: Modality) -> SwwaeConfig {
        self.modality = modality;
        let (lnll, lrec, lm) = self.effective_lambdas();
        SwwaeConfig {
            lambda_nll: lnll,
            lambda_l2rec: lrec,
            lambda_l2m: lm,
            ..self.config
        }
    }

    /// The lambda weights after modality masking.
    pub fn effective_lambdas(&self) -> (f64, f64, f64) {
        match self.modality {
            Modality::Supervised => (self.config.lambda_nll, 0.0, 0.0),
            Modality::Unsupervised => (0.0, self.config.lambda_l2rec, self.config.lambda_l2m),
            Modality::Semi => (
                self.config.lambda_nll,
                self.config.lambda_l2rec,
                self.config.lambda_l2m,
            ),
        }
    }

    pub fn set_loss_weights(&mut self, nll: f64, l2rec: f64, l2m: f64, l1: f64) -> Result<()> {
        let candidate = SwwaeConfig {
            lambda_nll: nll,
            lambda_l2rec: l2rec,
            lambda_l2m: l2m,
            l1_weight: l1,
            ..self.config
        };
        candidate.validate()?;
        self.config = candidate;
        Ok(())
    }

    pub fn set_pool_mode(&mut self, mode: PoolMode) -> Result<()> {
        let candidate = SwwaeConfig {
            pool_mode: mode,
            ..self.config
        };
        candidate.validate()?;
        self.config = candidate;
        Ok(())
    }

    /// Freeze the encoder prefix: its layers run in eval mode regardless of
    /// the requested mode (no batchnorm statistic updates, no dropout) and
    /// the backward pass stops at the head/decoder boundary, leaving
    /// encoder parameters and gradients untouched.
    pub fn freeze_encoder(&mut self, frozen: bool) {
        self.frozen_encoder = frozen;
    }

    pub fn encoder_frozen(&self) -> bool {
        self.frozen_encoder
    }

    fn check_images(&self, images: &Tensor) -> Result<usize> {
        let (c, h, w) = self.input_shape;
        if images.rank() != 4
            || images.shape()[1] != c
            || images.shape()[2] != h
            || images.shape()[3] != w
        {
            return Err(Error::invalid(format!(
                "expected images [N, {c}, {h}, {w}], got {:?}",
                images.shape()
            )));
        }
        Ok(images.shape()[0])
    }

    fn encode_internal(
        &mut self,
        images: &Tensor,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<(Vec<EncTrace>, Tensor, f64)> {
        let enc_mode = if self.frozen_encoder { Mode::Eval } else { mode };
        let l1w = self.config.l1_weight;
        let mut x = images.clone();
        let mut traces = Vec::with_capacity(self.enc.len());
        let mut l1 = 0.0;
        for layer in &mut self.enc {
            match layer {
                EncLayer::Conv(block) => {
                    let input = x;
                    let mut y = block.conv.forward(&input)?;
                    if let Some(bn) = &mut block.bn {
                        y = bn.forward(&y, enc_mode)?;
                    }
                    let pre_relu = y;
                    let h = relu(&pre_relu);
                    if l1w > 0.0 {
                        l1 += l1w * h.data().iter().map(|v| v.abs()).sum::<f64>();
                    }
                    x = block.dropout.forward(&h, enc_mode, rng);
                    traces.push(EncTrace::Conv { input, pre_relu });
                }
                EncLayer::Pool { size } => {
                    let input = x;
                    let out = match self.config.pool_mode {
                        PoolMode::Hard => hard_pool(&input, *size)?,
                        PoolMode::Soft { beta } => soft_pool(&input, *size, beta)?,
                    };
                    x = out.what.clone();
                    traces.push(EncTrace::Pool { input, out });
                }
            }
        }
        Ok((traces, x, l1))
    }

    fn head_internal(
        &mut self,
        prefix_out: &Tensor,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<(Vec<HeadTrace>, Option<Tensor>)> {
        if self.head.is_empty() {
            return Ok((Vec::new(), None));
        }
        let n = prefix_out.shape()[0];
        let mut h = prefix_out.reshape(&[n, prefix_out.len() / n])?;
        let mut traces = Vec::with_capacity(self.head.len());
        for layer in &mut self.head {
            let fc_input = layer.dropout.forward(&h, mode, rng);
            let z = layer.fc.forward(&fc_input)?;
            if layer.relu_after {
                h = relu(&z);
                traces.push(HeadTrace {
                    fc_input,
                    pre_relu: Some(z),
                });
            } else {
                h = z;
                traces.push(HeadTrace {
                    fc_input,
                    pre_relu: None,
                });
            }
        }
        Ok((traces, Some(h)))
    }

    fn decode_internal(
        &mut self,
        prefix_out: &Tensor,
        enc_traces: &[EncTrace],
        input: &Tensor,
        mode: Mode,
        kind: LateralKind,
    ) -> Result<(DecTrace, Tensor, f64, f64)> {
        let dec = self
            .dec
            .as_mut()
            .ok_or_else(|| Error::invalid("model was built without a decoder"))?;
        let k = dec.len();
        let mut x = prefix_out.clone();
        let mut layers = Vec::with_capacity(k);
        let mut taps = vec![None; k];
        let (mut l_l2rec, mut l_l2m) = (0.0, 0.0);
        let mut recon = None;
        for (j, layer) in dec.iter_mut().enumerate() {
            let enc_index = k - 1 - j;
            match layer {
                DecLayer::Unpool { size } => {
                    let EncTrace::Pool { out, .. } = &enc_traces[enc_index] else {
                        return Err(Error::invalid("decoder unpool mirrors a non-pool layer"));
                    };
                    match kind {
                        LateralKind::Where => {
                            let used = PoolOutput {
                                what: x,
                                where_map: out.where_map.clone(),
                                size: *size,
                            };
                            x = match &used.where_map {
                                WhereMap::Hard(_) => hard_unpool(&used)?,
                                WhereMap::Soft { .. } => soft_unpool(&used)?,
                            };
                            layers.push(DecLayerTrace::Unpool {
                                used: Some(used),
                                enc_index,
                                kind,
                            });
                        }
                        LateralKind::Upsample => {
                            let y = upsample(&x, *size)?;
                            x = y;
                            layers.push(DecLayerTrace::Unpool {
                                used: None,
                                enc_index,
                                kind,
                            });
                        }
                    }
                }
                DecLayer::Conv(block) => {
                    let conv_in = x;
                    let mut y = block.conv.forward(&conv_in)?;
                    if let Some(bn) = &mut block.bn {
                        y = bn.forward(&y, mode)?;
                    }
                    if block.last {
                        x = y;
                        layers.push(DecLayerTrace::Conv {
                            input: conv_in,
                            pre_relu: None,
                        });
                    } else {
                        let pre_relu = y;
                        x = relu(&pre_relu);
                        layers.push(DecLayerTrace::Conv {
                            input: conv_in,
                            pre_relu: Some(pre_relu),
                        });
                    }
                }
            }
            // the output of decoder layer j sits at the same point as the
            // input of encoder layer enc_index
            if self.stage_starts.contains(&enc_index) {
                if enc_index == 0 {
                    l_l2rec = l2_loss(&x, input)?.0;
                    recon = Some(x.clone());
                } else {
                    l_l2m += l2_loss(&x, enc_traces[enc_index].input())?.0;
                    taps[j] = Some(x.clone());
                }
            }
        }
        let recon = recon.ok_or_else(|| Error::invalid("decoder produced no reconstruction"))?;
        Ok((DecTrace { layers, taps }, recon, l_l2rec, l_l2m))
    }

    /// Full forward pass. `labels` may be omitted when `mask` is all-false
    /// (pure unsupervised); rows with a false mask contribute nothing to
    /// the NLL. The decoder runs only when a reconstruction weight is live,
    /// so supervised mode does the exact work of a plain Convnet.
    pub fn forward(
        &mut self,
        images: &Tensor,
        labels: Option<&[usize]>,
        mask: &[bool],
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<(ForwardTrace, LossBreakdown)> {
        let n = self.check_images(images)?;
        if mask.len() != n {
            return Err(Error::invalid(format!(
                "mask length {} != batch size {n}",
                mask.len()
            )));
        }
        let any_labeled = mask.iter().any(|&m| m);
        if any_labeled && labels.is_none() {
            return Err(Error::invalid("mask marks labeled samples but no labels given"));
        }
        if any_labeled && self.head.is_empty() {
            return Err(Error::invalid(
                "architecture has no fully-connected head to classify with",
            ));
        }
        if let Some(l) = labels {
            if l.len() != n {
                return Err(Error::invalid(format!(
                    "labels length {} != batch size {n}",
                    l.len()
                )));
            }
        }

        let (enc_traces, prefix_out, l_l1) = self.encode_internal(images, mode, rng)?;
        let (head_traces, logits) = self.head_internal(&prefix_out, mode, rng)?;

        let zero_labels;
        let (l_nll, grad_logits) = match &logits {
            Some(lg) => {
                let label_slice = match labels {
                    Some(l) => l,
                    None => {
                        zero_labels = vec![0usize; n];
                        &zero_labels
                    }
                };
                let (loss, grad) = softmax_nll(lg, label_slice, mask)?;
                (loss, Some(grad))
            }
            None => (0.0, None),
        };

        let (lnll, lrec, lm) = self.effective_lambdas();
        let run_decoder = self.dec.is_some() && (lrec > 0.0 || lm > 0.0);
        let (dec_trace, recon, l_l2rec, l_l2m) = if run_decoder {
            let (t, r, a, b) =
                self.decode_internal(&prefix_out, &enc_traces, images, mode, LateralKind::Where)?;
            (Some(t), Some(r), a, b)
        } else {
            (None, None, 0.0, 0.0)
        };

        let losses = LossBreakdown {
            l_nll,
            l_l2rec,
            l_l2m,
            l_l1,
            l_total: lnll * l_nll + lrec * l_l2rec + lm * l_l2m + l_l1,
        };
        let trace = ForwardTrace {
            input: images.clone(),
            enc: enc_traces,
            prefix_shape: prefix_out.shape().to_vec(),
            head: head_traces,
            logits,
            grad_logits,
            dec: dec_trace,
            recon,
        };
        Ok((trace, losses))
    }

    /// Accumulate the exact gradient of the total loss into every
    /// parameter's grad buffer. Must follow the matching [`Self::forward`]
    /// with no other forward in between (batchnorm caches are per-pass).
    pub fn backward(&mut self, trace: &ForwardTrace) -> Result<()> {
        let (lnll, lrec, lm) = self.effective_lambdas();
        let l1w = self.config.l1_weight;

        // head path: lambda-weighted NLL gradient down to the prefix output
        let mut grad_top = Tensor::zeros(&trace.prefix_shape);
        if lnll > 0.0 {
            if let Some(gl) = &trace.grad_logits {
                let mut g = gl.scale(lnll);
                for (layer, t) in self.head.iter_mut().zip(&trace.head).rev() {
                    if let Some(pre) = &t.pre_relu {
                        g = relu_backward(pre, &g);
                    }
                    g = layer.fc.backward(&t.fc_input, &g)?;
                    g = layer.dropout.backward(&g)?;
                }
                grad_top = g.reshape(&trace.prefix_shape)?;
            }
        }

        // decoder path: reconstruction gradients back up to the prefix
        // output, collecting lateral where-gradients per encoder pool
        let mut lateral: Vec<Option<(Tensor, Tensor)>> = vec![None; trace.enc.len()];
        if let Some(dect) = &trace.dec {
            let recon = trace.recon.as_ref().expect("decoder trace carries recon");
            let dec = self.dec.as_mut().expect("decoder trace implies decoder");
            let k = dec.len();
            let mut g = l2_loss(recon, &trace.input)?.1.scale(lrec);
            for j in (0..k).rev() {
                if let Some(tap) = &dect.taps[j] {
                    let enc_input = trace.enc[k - 1 - j].input();
                    g.axpy(lm, &l2_loss(tap, enc_input)?.1)?;
                }
                match (&mut dec[j], &dect.layers[j]) {
                    (DecLayer::Conv(block), DecLayerTrace::Conv { input, pre_relu }) => {
                        let mut gg = g;
                        if let Some(pre) = pre_relu {
                            gg = relu_backward(pre, &gg);
                        }
                        if let Some(bn) = &mut block.bn {
                            gg = bn.backward(&gg)?;
                        }
                        g = block.conv.backward(input, &gg)?;
                    }
                    (
                        DecLayer::Unpool { size },
                        DecLayerTrace::Unpool {
                            used,
                            enc_index,
                            kind,
                        },
                    ) => match kind {
                        LateralKind::Where => {
                            let used = used.as_ref().expect("where-kind unpool caches its input");
                            match &used.where_map {
                                WhereMap::Hard(_) => g = hard_unpool_backward(used, &g)?,
                                WhereMap::Soft { .. } => {
                                    let (gw, gpx, gpy) = soft_unpool_backward(used, &g)?;
                                    lateral[*enc_index] = Some((gpx, gpy));
                                    g = gw;
                                }
                            }
                        }
                        LateralKind::Upsample => g = upsample_backward(&g, *size)?,
                    },
                    _ => return Err(Error::invalid("decoder trace misaligned with layers")),
                }
            }
            grad_top.axpy(1.0, &g)?;
        }

        if self.frozen_encoder {
            return Ok(());
        }

        // encoder walk, deepest layer first
        let mut g = grad_top;
        for i in (0..self.enc.len()).rev() {
            match (&mut self.enc[i], &trace.enc[i]) {
                (EncLayer::Conv(block), EncTrace::Conv { input, pre_relu }) => {
                    let mut gg = block.dropout.backward(&g)?;
                    if l1w > 0.0 {
                        // d/dh of l1_weight * sum|h| on the post-ReLU
                        // activation h: h > 0 exactly where pre_relu > 0
                        for (gv, &pre) in gg.data_mut().iter_mut().zip(pre_relu.data()) {
                            if pre > 0.0 {
                                *gv += l1w;
                            }
                        }
                    }
                    gg = relu_backward(pre_relu, &gg);
                    if let Some(bn) = &mut block.bn {
                        gg = bn.backward(&gg)?;
                    }
                    g = block.conv.backward(input, &gg)?;
                }
                (EncLayer::Pool { size }, EncTrace::Pool { input, out }) => {
                    g = match self.config.pool_mode {
                        PoolMode::Hard => hard_pool_backward(out, &g)?,
                        PoolMode::Soft { beta } => {
                            let (gpx, gpy) = match lateral[i].take() {
                                Some(pair) => pair,
                                None => (Tensor::zeros_like(&out.what), Tensor::zeros_like(&out.what)),
                            };
                            soft_pool_backward(input, *size, beta, out, &g, &gpx, &gpy)?
                        }
                    };
                }
                _ => return Err(Error::invalid("encoder trace misaligned with layers")),
            }
            // encoder side of the intermediate L2 term at stage inputs
            if i > 0 && self.stage_starts.contains(&i) {
                if let Some(dect) = &trace.dec {
                    let j = trace.enc.len() - 1 - i;
                    if let Some(tap) = &dect.taps[j] {
                        g.axpy(lm, &l2_loss(trace.enc[i].input(), tap)?.1)?;
                    }
                }
            }
        }
        Ok(())
    }

    /// Eval-mode logits (dropout off, batchnorm running statistics).
    pub fn infer_logits(&mut self, images: &Tensor) -> Result<Tensor> {
        self.check_images(images)?;
        let mut dummy = rng::stream(0, 0);
        let (_, prefix_out, _) = self.encode_internal(images, Mode::Eval, &mut dummy)?;
        let (_, logits) = self.head_internal(&prefix_out, Mode::Eval, &mut dummy)?;
        logits.ok_or_else(|| Error::invalid("architecture has no fully-connected head"))
    }

    /// Deterministic eval-mode reconstruction through true unpooling.
    pub fn reconstruct(&mut self, images: &Tensor) -> Result<Tensor> {
        self.reconstruct_via(images, LateralKind::Where)
    }

    /// Reconstruction with a choice of lateral: true where or the upsample
    /// baseline that discards it.
    pub fn reconstruct_via(&mut self, images: &Tensor, kind: LateralKind) -> Result<Tensor> {
        self.check_images(images)?;
        let mut dummy = rng::stream(0, 0);
        let (enc_traces, prefix_out, _) = self.encode_internal(images, Mode::Eval, &mut dummy)?;
        let (_, recon, _, _) =
            self.decode_internal(&prefix_out, &enc_traces, images, Mode::Eval, kind)?;
        Ok(recon)
    }

    /// Eval-mode encoder pass exposing every pooling split (what plus
    /// where), in encounter order, together with the prefix output.
    pub fn encode_pools(&mut self, images: &Tensor) -> Result<(Tensor, Vec<PoolOutput>)> {
        self.check_images(images)?;
        let mut dummy = rng::stream(0, 0);
        let (enc_traces, prefix_out, _) = self.encode_internal(images, Mode::Eval, &mut dummy)?;
        let pools = enc_traces
            .into_iter()
            .filter_map(|t| match t {
                EncTrace::Pool { out, .. } => Some(out),
                _ => None,
            })
            .collect();
        Ok((prefix_out, pools))
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Every learnable parameter in declaration order: encoder blocks,
    /// head, decoder. The order is the checkpoint and optimizer contract.
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for layer in &mut self.enc {
            if let EncLayer::Conv(block) = layer {
                out.push(&mut block.conv.weight);
                out.push(&mut block.conv.bias);
                if let Some(bn) = &mut block.bn {
                    out.push(&mut bn.scale);
                    out.push(&mut bn.shift);
                }
            }
        }
        for layer in &mut self.head {
            out.push(&mut layer.fc.weight);
            out.push(&mut layer.fc.bias);
        }
        if let Some(dec) = &mut self.dec {
            for layer in dec {
                if let DecLayer::Conv(block) = layer {
                    out.push(&mut block.conv.weight);
                    out.push(&mut block.conv.bias);
                    if let Some(bn) = &mut block.bn {
                        out.push(&mut bn.scale);
                        out.push(&mut bn.shift);
                    }
                }
            }
        }
        out
    }

    /// Parameters of the classifier head only (frozen-encoder training).
    pub fn head_params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for layer in &mut self.head {
            out.push(&mut layer.fc.weight);
            out.push(&mut layer.fc.bias);
        }
        out
    }

    /// Encoder plus head parameters (the Convnet pathway), excluding the
    /// decoder.
    pub fn convnet_params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for layer in &mut self.enc {
            if let EncLayer::Conv(block) = layer {
                out.push(&mut block.conv.weight);
                out.push(&mut block.conv.bias);
                if let Some(bn) = &mut block.bn {
                    out.push(&mut bn.scale);
                    out.push(&mut bn.shift);
                }
            }
        }
        for layer in &mut self.head {
            out.push(&mut layer.fc.weight);
            out.push(&mut layer.fc.bias);
        }
        out
    }

    /// Flattened copy of all parameter values in declaration order.
    pub fn param_vector(&mut self) -> Vec<f64> {
        let mut v = Vec::new();
        for p in self.params_mut() {
            v.extend_from_slice(p.value.data());
        }
        v
    }

    pub fn set_param_vector(&mut self, values: &[f64]) -> Result<()> {
        let total: usize = {
            let params = self.params_mut();
            params.iter().map(|p| p.value.len()).sum()
        };
        if values.len() != total {
            return Err(Error::invalid(format!(
                "parameter vector length {} != model total {total}",
                values.len()
            )));
        }
        let mut at = 0;
        for p in self.params_mut() {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&values[at..at + n]);
            at += n;
        }
        Ok(())
    }

    /// Flattened copy of all parameter gradients, aligned with
    /// [`Self::param_vector`].
    pub fn grad_vector(&mut self) -> Vec<f64> {
        let mut v = Vec::new();
        for p in self.params_mut() {
            v.extend_from_slice(p.grad.data());
        }
        v
    }

    /// All persistent state tensors (parameters plus batchnorm running
    /// statistics) in declaration order, for serialization.
    pub(crate) fn visit_state<F: FnMut(&Tensor)>(&mut self, mut f: F) {
        Self::walk_state(&mut self.enc, &mut self.head, &mut self.dec, |t| f(&*t));
    }

    pub(crate) fn visit_state_mut<F: FnMut(&mut Tensor)>(&mut self, mut f: F) {
        Self::walk_state(&mut self.enc, &mut self.head, &mut self.dec, |t| f(t));
    }

    fn walk_state<F: FnMut(&mut Tensor)>(
        enc: &mut [EncLayer],
        head: &mut [HeadLayer],
        dec: &mut Option<Vec<DecLayer>>,
        mut f: F,
    ) {
        let conv_block = |conv: &mut ConvLayer, bn: &mut Option<BatchNorm>, f: &mut F| {
            f(&mut conv.weight.value);
            f(&mut conv.bias.value);
            if let Some(bn) = bn {
                f(&mut bn.scale.value);
                f(&mut bn.shift.value);
                f(&mut bn.running_mean);
                f(&mut bn.running_var);
            }
        };
        for layer in enc.iter_mut() {
            if let EncLayer::Conv(block) = layer {
                conv_block(&mut block.conv, &mut block.bn, &mut f);
            }
        }
        for layer in head.iter_mut() {
            f(&mut layer.fc.weight.value);
            f(&mut layer.fc.bias.value);
        }
        if let Some(dec) = dec {
            for layer in dec.iter_mut() {
                if let DecLayer::Conv(block) = layer {
                    conv_block(&mut block.conv, &mut block.bn, &mut f);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archdsl::parse_architecture;
    use crate::rng::uniform_fill;

    fn random_images(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, 94);
        let mut t = Tensor::zeros(&[n, c, h, w]);
        uniform_fill(t.data_mut(), -1.0, 1.0, &mut r);
        t
    }

    fn tiny_model(pool: PoolMode, with_decoder: bool, seed: u64) -> SwwaeModel {
        let arch = parse_architecture("(4)3c-2p-(4)3c-2p-4fc").unwrap();
        let config = SwwaeConfig {
            lambda_nll: 1.0,
            lambda_l2rec: 0.7,
            lambda_l2m: 0.5,
            pool_mode: pool,
            ..SwwaeConfig::default()
        };
        SwwaeModel::new(&arch, 1, 8, 8, config, with_decoder, seed).unwrap()
    }

    #[test]
    fn supervised_total_is_exactly_nll() {
        let mut m = tiny_model(PoolMode::Hard, true, 1);
        m.set_modality(Modality::Supervised);
        let x = random_images(3, 1, 8, 8, 2);
        let labels = [0usize, 1, 3];
        let mut r = rng::stream(3, 0);
        let (_, losses) = m
            .forward(&x, Some(&labels), &[true; 3], Mode::Train, &mut r)
            .unwrap();
        assert_eq!(losses.l_total, losses.l_nll);
        assert_eq!(losses.l_l2rec, 0.0);
        assert_eq!(losses.l_l2m, 0.0);
    }

    #[test]
    fn unsupervised_total_is_pure_reconstruction() {
        let mut m = tiny_model(PoolMode::Hard, true, 1);
        m.set_modality(Modality::Unsupervised);
        let x = random_images(3, 1, 8, 8, 2);
        let mut r = rng::stream(3, 0);
        let (_, losses) = m
            .forward(&x, None, &[false; 3], Mode::Train, &mut r)
            .unwrap();
        assert_eq!(
            losses.l_total,
            0.7 * losses.l_l2rec + 0.5 * losses.l_l2m
        );
        assert!(losses.l_l2rec > 0.0);
        assert!(losses.l_l2m > 0.0);
    }

    #[test]
    fn untrained_ten_class_nll_is_near_log_ten() {
        let arch = parse_architecture("(8)3c-2p-10fc").unwrap();
        let mut m = SwwaeModel::new(&arch, 1, 8, 8, SwwaeConfig::default(), false, 7).unwrap();
        let x = random_images(16, 1, 8, 8, 8);
        let labels: Vec<usize> = (0..16).map(|i| i % 10).collect();
        let mut r = rng::stream(9, 0);
        let (_, losses) = m
            .forward(&x, Some(&labels), &[true; 16], Mode::Train, &mut r)
            .unwrap();
        assert!(
            (losses.l_nll - 10.0_f64.ln()).abs() < 0.2,
            "l_nll {}",
            losses.l_nll
        );
    }

    #[test]
    fn loss_additivity_holds() {
        let mut m = tiny_model(PoolMode::Soft { beta: 2.0 }, true, 4);
        let x = random_images(2, 1, 8, 8, 5);
        let labels = [1usize, 2];
        let mut r = rng::stream(6, 0);
        let (_, losses) = m
            .forward(&x, Some(&labels), &[true, true], Mode::Train, &mut r)
            .unwrap();
        let want = 1.0 * losses.l_nll + 0.7 * losses.l_l2rec + 0.5 * losses.l_l2m + losses.l_l1;
        assert!((losses.l_total - want).abs() <= 1e-12);
    }

    #[test]
    fn stage_taps_shape_match() {
        // two-stage arch: one interior tap whose shapes must pair up
        let mut m = tiny_model(PoolMode::Hard, true, 10);
        let x = random_images(2, 1, 8, 8, 11);
        let mut r = rng::stream(12, 0);
        let (trace, _) = m.forward(&x, None, &[false; 2], Mode::Train, &mut r).unwrap();
        let dect = trace.dec.as_ref().unwrap();
        let mut found = 0;
        for (j, tap) in dect.taps.iter().enumerate() {
            if let Some(t) = tap {
                let i = trace.enc.len() - 1 - j;
                assert_eq!(t.shape(), trace.enc[i].input().shape());
                found += 1;
            }
        }
        assert_eq!(found, 1, "one interior stage boundary expected");
        assert_eq!(trace.recon.as_ref().unwrap().shape(), x.shape());
    }

    #[test]
    fn zero_lambdas_collapse_to_plain_convnet_bitwise() {
        let x = random_images(4, 1, 8, 8, 20);
        let labels = [0usize, 1, 2, 3];
        let run = |with_decoder: bool| -> (Vec<f64>, f64) {
            let mut m = tiny_model(PoolMode::Hard, with_decoder, 21);
            m.set_modality(Modality::Supervised);
            let mut r = rng::stream(22, 0);
            let (trace, losses) = m
                .forward(&x, Some(&labels), &[true; 4], Mode::Train, &mut r)
                .unwrap();
            m.backward(&trace).unwrap();
            // compare over the shared (encoder + head) parameters
            let grads: Vec<f64> = m
                .convnet_params_mut()
                .iter()
                .flat_map(|p| p.grad.data().to_vec())
                .collect();
            (grads, losses.l_total)
        };
        let (g_with, l_with) = run(true);
        let (g_without, l_without) = run(false);
        assert_eq!(l_with, l_without);
        assert_eq!(g_with, g_without, "gradients must be bitwise equal");
    }

    #[test]
    fn doubling_lambda_l2rec_doubles_its_gradient_component() {
        let x = random_images(2, 1, 8, 8, 30);
        let grads_at = |lrec: f64| -> Vec<f64> {
            let mut m = tiny_model(PoolMode::Soft { beta: 2.0 }, true, 31);
            m.set_loss_weights(1.0, lrec, 0.0, 0.0).unwrap();
            let mut r = rng::stream(32, 0);
            let (trace, _) = m.forward(&x, None, &[false; 2], Mode::Train, &mut r).unwrap();
            m.backward(&trace).unwrap();
            m.grad_vector()
        };
        let g0 = grads_at(0.0);
        let g1 = grads_at(1.0);
        let g2 = grads_at(2.0);
        for i in 0..g0.len() {
            let once = g1[i] - g0[i];
            let twice = g2[i] - g0[i];
            assert!(
                (twice - 2.0 * once).abs() <= 1e-12 * twice.abs().max(1.0),
                "component {i}: {twice} vs {}",
                2.0 * once
            );
        }
    }

    #[test]
    fn topmost_decoder_conv_gets_gradient_with_l2m() {
        let mut m = tiny_model(PoolMode::Hard, true, 40);
        m.set_modality(Modality::Unsupervised);
        let x = random_images(2, 1, 8, 8, 41);
        let mut r = rng::stream(42, 0);
        let (trace, _) = m.forward(&x, None, &[false; 2], Mode::Train, &mut r).unwrap();
        m.backward(&trace).unwrap();
        // first decoder conv (nearest the encoder top)
        let dec = m.dec.as_mut().unwrap();
        let first_conv = dec
            .iter_mut()
            .find_map(|l| match l {
                DecLayer::Conv(b) => Some(b),
                _ => None,
            })
            .unwrap();
        let norm: f64 = first_conv.conv.weight.grad.data().iter().map(|g| g * g).sum();
        assert!(norm > 0.0, "upper decoder layers must not be idle");
    }

    #[test]
    fn full_model_gradient_matches_finite_differences_soft() {
        let mut m = tiny_model(PoolMode::Soft { beta: 3.0 }, true, 50);
        let x = random_images(2, 1, 8, 8, 51);
        let labels = [1usize, 3];
        let mask = [true, true];

        let mut r = rng::stream(52, 0);
        m.zero_grads();
        let (trace, _) = m
            .forward(&x, Some(&labels), &mask, Mode::Train, &mut r)
            .unwrap();
        m.backward(&trace).unwrap();
        let analytic = m.grad_vector();
        let theta = m.param_vector();

        let loss_at = |v: &[f64], m: &mut SwwaeModel| -> f64 {
            m.set_param_vector(v).unwrap();
            let mut r = rng::stream(52, 0);
            let (_, losses) = m
                .forward(&x, Some(&labels), &mask, Mode::Train, &mut r)
                .unwrap();
            losses.l_total
        };
        let eps = 1e-5;
        let sample: Vec<usize> = (0..theta.len()).step_by(theta.len() / 60 + 1).collect();
        for idx in sample {
            let mut vp = theta.clone();
            vp[idx] += eps;
            let mut vm = theta.clone();
            vm[idx] -= eps;
            let num = (loss_at(&vp, &mut m) - loss_at(&vm, &mut m)) / (2.0 * eps);
            let ana = analytic[idx];
            let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-8);
            assert!(rel < 1e-4, "theta[{idx}]: analytic {ana} vs numeric {num}");
        }
    }

    #[test]
    fn reconstruct_is_deterministic() {
        let mut m = tiny_model(PoolMode::Soft { beta: 5.0 }, true, 60);
        let x = random_images(2, 1, 8, 8, 61);
        let a = m.reconstruct(&x).unwrap();
        let b = m.reconstruct(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn upsample_reconstruction_is_block_constant_with_pointwise_decoder() {
        // 1x1 kernels keep the upsample blocks intact through the decoder
        let arch = parse_architecture("(4)1c-2p").unwrap();
        let config = SwwaeConfig {
            lambda_l2rec: 1.0,
            ..SwwaeConfig::default()
        };
        let mut m = SwwaeModel::new(&arch, 1, 4, 4, config, true, 62).unwrap();
        let x = random_images(1, 1, 4, 4, 63);
        let r = m.reconstruct_via(&x, LateralKind::Upsample).unwrap();
        for ry in 0..2 {
            for rx in 0..2 {
                let v = r.at4(0, 0, ry * 2, rx * 2);
                for dy in 0..2 {
                    for dx in 0..2 {
                        assert_eq!(r.at4(0, 0, ry * 2 + dy, rx * 2 + dx), v);
                    }
                }
            }
        }
    }

    #[test]
    fn modality_switch_masks_weights() {
        let mut m = tiny_model(PoolMode::Hard, true, 70);
        let eff = m.set_modality(Modality::Supervised);
        assert_eq!(
            (eff.lambda_nll, eff.lambda_l2rec, eff.lambda_l2m),
            (1.0, 0.0, 0.0)
        );
        let eff = m.set_modality(Modality::Unsupervised);
        assert_eq!(
            (eff.lambda_nll, eff.lambda_l2rec, eff.lambda_l2m),
            (0.0, 0.7, 0.5)
        );
        let eff = m.set_modality(Modality::Semi);
        assert_eq!(
            (eff.lambda_nll, eff.lambda_l2rec, eff.lambda_l2m),
            (1.0, 0.7, 0.5)
        );
    }

    #[test]
    fn masked_rows_without_labels_error() {
        let mut m = tiny_model(PoolMode::Hard, true, 80);
        let x = random_images(2, 1, 8, 8, 81);
        let mut r = rng::stream(82, 0);
        assert!(m
            .forward(&x, None, &[true, false], Mode::Train, &mut r)
            .is_err());
        // all-false mask without labels is the unsupervised case
        assert!(m
            .forward(&x, None, &[false, false], Mode::Train, &mut r)
            .is_ok());
    }

    #[test]
    fn frozen_encoder_gets_no_gradient_and_no_stat_updates() {
        let arch = parse_architecture("(4)3c-2p-4fc").unwrap();
        let config = SwwaeConfig {
            batchnorm: true,
            lambda_l2rec: 1.0,
            ..SwwaeConfig::default()
        };
        let mut m = SwwaeModel::new(&arch, 1, 8, 8, config, true, 90).unwrap();
        m.freeze_encoder(true);
        let x = random_images(4, 1, 8, 8, 91);
        let labels = [0usize, 1, 2, 3];
        let running_before = {
            let EncLayer::Conv(block) = &m.enc[0] else { unreachable!() };
            block.bn.as_ref().unwrap().running_mean.clone()
        };
        let mut r = rng::stream(92, 0);
        let (trace, _) = m
            .forward(&x, Some(&labels), &[true; 4], Mode::Train, &mut r)
            .unwrap();
        m.backward(&trace).unwrap();
        let EncLayer::Conv(block) = &m.enc[0] else { unreachable!() };
        assert!(block.conv.weight.grad.data().iter().all(|&g| g == 0.0));
        assert_eq!(block.bn.as_ref().unwrap().running_mean, running_before);
        // the head still learns
        let head_grad: f64 = m.head[0].fc.weight.grad.data().iter().map(|g| g.abs()).sum();
        assert!(head_grad > 0.0);
    }

    #[test]
    fn headless_architecture_classifies_nothing() {
        let arch = parse_architecture("(4)3c-2p").unwrap();
        let config = SwwaeConfig {
            lambda_l2rec: 1.0,
            ..SwwaeConfig::default()
        };
        let mut m = SwwaeModel::new(&arch, 1, 8, 8, config, true, 95).unwrap();
        let x = random_images(2, 1, 8, 8, 96);
        let mut r = rng::stream(97, 0);
        let (trace, losses) = m
            .forward(&x, None, &[false, false], Mode::Train, &mut r)
            .unwrap();
        assert!(trace.logits.is_none());
        assert_eq!(losses.l_nll, 0.0);
        assert!(losses.l_l2rec > 0.0);
        assert!(m.infer_logits(&x).is_err());
        // a labeled mask cannot be served without a head
        assert!(m
            .forward(&x, Some(&[0, 1]), &[true, true], Mode::Train, &mut r)
            .is_err());
    }

    #[test]
    fn l1_penalty_contributes_loss_and_gradient() {
        let arch = parse_architecture("(4)3c-2p-4fc").unwrap();
        let mut with = SwwaeModel::new(
            &arch,
            1,
            8,
            8,
            SwwaeConfig {
                l1_weight: 0.01,
                ..SwwaeConfig::default()
            },
            false,
            98,
        )
        .unwrap();
        let mut without =
            SwwaeModel::new(&arch, 1, 8, 8, SwwaeConfig::default(), false, 98).unwrap();
        let x = random_images(2, 1, 8, 8, 99);
        let labels = [0usize, 1];
        let mut r1 = rng::stream(100, 0);
        let mut r2 = rng::stream(100, 0);
        let (t1, l1) = with
            .forward(&x, Some(&labels), &[true; 2], Mode::Train, &mut r1)
            .unwrap();
        let (t2, l2) = without
            .forward(&x, Some(&labels), &[true; 2], Mode::Train, &mut r2)
            .unwrap();
        assert!(l1.l_l1 > 0.0);
        assert_eq!(l2.l_l1, 0.0);
        assert!((l1.l_total - (l2.l_total + l1.l_l1)).abs() < 1e-12);
        with.backward(&t1).unwrap();
        without.backward(&t2).unwrap();
        assert_ne!(with.grad_vector(), without.grad_vector());
    }
}
