//! The full network: convolutional stem, feature encoder, entity decoder,
//! and the triplet decoder whose layers chain coupled self-attention,
//! decoupled visual attention and decoupled entity attention, followed by
//! the prediction heads.
//!
//! Every decoder layer's outputs are kept so the loss can supervise all of
//! them, and so ablation studies can disable individual attention modules.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{att_block, fan_in_uniform, AttentionParams, ForwardCtx, LAYER_NORM_EPS};
use crate::boxes::BBox;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

/// Which attention modules are active. Disabling one turns it into the
/// identity on its query stream; disabling the mask head drops the spatial
/// feature from predicate classification.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    pub csa: bool,
    pub dva: bool,
    pub dea: bool,
    pub mask: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            csa: true,
            dva: true,
            dea: true,
            mask: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub model_dim: usize,
    pub head_count: usize,
    pub encoder_layers: usize,
    /// Shared layer count for the entity and triplet decoders.
    pub decoder_layers: usize,
    pub entity_queries: usize,
    pub triplet_queries: usize,
    /// Real entity classes; background is appended internally.
    pub entity_classes: usize,
    /// Real predicate classes; no-relation is appended internally.
    pub predicate_classes: usize,
    pub dropout: f64,
    pub mask_resolution: usize,
    /// Square input image edge; the stem downsamples by 4.
    pub image_size: usize,
    pub ffn_dim: usize,
    #[serde(default)]
    pub ablation: Ablation,
    /// Feed every triplet decoder layer the final entity-decoder output
    /// instead of the same-depth layer's output.
    #[serde(default)]
    pub dea_final_layer_only: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// Desk-scale defaults.
    pub fn desk() -> Self {
        ModelConfig {
            model_dim: 64,
            head_count: 4,
            encoder_layers: 3,
            decoder_layers: 3,
            entity_queries: 12,
            triplet_queries: 16,
            entity_classes: 10,
            predicate_classes: 8,
            dropout: 0.1,
            mask_resolution: 28,
            image_size: 32,
            ffn_dim: 128,
            ablation: Ablation::default(),
            dea_final_layer_only: false,
        }
    }

    /// Full-scale defaults; far beyond what a single core trains in
    /// reasonable time, kept for reference.
    pub fn full() -> Self {
        ModelConfig {
            model_dim: 256,
            head_count: 8,
            encoder_layers: 6,
            decoder_layers: 6,
            entity_queries: 100,
            triplet_queries: 200,
            entity_classes: 150,
            predicate_classes: 50,
            dropout: 0.1,
            mask_resolution: 28,
            image_size: 512,
            ffn_dim: 2048,
            ablation: Ablation::default(),
            dea_final_layer_only: false,
        }
    }

    pub fn grid_h(&self) -> usize {
        self.image_size / 4
    }

    pub fn grid_w(&self) -> usize {
        self.image_size / 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.head_count == 0 || self.model_dim % self.head_count != 0 {
            return Err(Error::Config(format!(
                "model_dim {} must be a positive multiple of head_count {}",
                self.model_dim, self.head_count
            )));
        }
        if self.model_dim % 4 != 0 {
            return Err(Error::Config(format!(
                "model_dim {} must be divisible by 4 for the positional encoding",
                self.model_dim
            )));
        }
        if self.image_size % 4 != 0 || self.image_size == 0 {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of 4",
                self.image_size
            )));
        }
        if self.decoder_layers == 0 {
            return Err(Error::Config("decoder_layers must be at least 1".into()));
        }
        if self.entity_queries == 0 || self.triplet_queries == 0 {
            return Err(Error::Config("query counts must be at least 1".into()));
        }
        if self.entity_classes == 0 || self.predicate_classes == 0 {
            return Err(Error::Config("class counts must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.mask_resolution < 8 {
            return Err(Error::Config(format!(
                "mask_resolution {} too small for the convolutional mask head",
                self.mask_resolution
            )));
        }
        if self.ablation.mask && !self.ablation.dva {
            return Err(Error::Config(
                "mask head needs the visual-attention heat maps; disable mask too".into(),
            ));
        }
        Ok(())
    }

    /// Spatial feature length produced by the mask head.
    pub fn spatial_dim(&self) -> usize {
        let o1 = conv_out(self.mask_resolution);
        let o2 = conv_out(o1);
        let o3 = conv_out(o2);
        MASK_CHANNELS[2] * o3 * o3
    }
}

fn conv_out(r: usize) -> usize {
    // 3x3 kernel, stride 2, pad 1.
    (r + 2 - 3) / 2 + 1
}

const MASK_CHANNELS: [usize; 3] = [4, 8, 8];

/// One decoder slot's output as plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletPrediction {
    pub subject_logits: Vec<f64>,
    pub subject_box: BBox,
    pub object_logits: Vec<f64>,
    pub object_box: BBox,
    pub predicate_logits: Vec<f64>,
    pub subject_heatmap: Vec<f64>,
    pub object_heatmap: Vec<f64>,
}

/// Separable 2D sinusoidal encoding: the first half of the channels encodes
/// the row index, the second half the column index, each as interleaved
/// sin/cos over geometrically spaced frequencies.
pub fn positional_encoding(h: usize, w: usize, d: usize) -> Result<Tensor> {
    if d % 4 != 0 {
        return Err(Error::Config(format!(
            "positional encoding needs d divisible by 4, got {d}"
        )));
    }
    let half = d / 2;
    let pairs = half / 2;
    let mut data = vec![0.0; h * w * d];
    for y in 0..h {
        for x in 0..w {
            let row = (y * w + x) * d;
            for i in 0..pairs {
                let freq = 1.0 / 10000.0_f64.powf(2.0 * i as f64 / half as f64);
                data[row + 2 * i] = (y as f64 * freq).sin();
                data[row + 2 * i + 1] = (y as f64 * freq).cos();
                data[row + half + 2 * i] = (x as f64 * freq).sin();
                data[row + half + 2 * i + 1] = (x as f64 * freq).cos();
            }
        }
    }
    Tensor::new(vec![h * w, d], data)
}

#[derive(Debug, Clone)]
struct ConvParams {
    w: ParamId,
    b: ParamId,
}

impl ConvParams {
    fn init(
        store: &mut ParamStore,
        prefix: &str,
        cout: usize,
        cin: usize,
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = cin * k * k;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..cout * cin * k * k)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        let w = store.register(
            format!("{prefix}.w"),
            Tensor::new(vec![cout, cin, k, k], data).expect("conv shape"),
        );
        let b = store.register(
            format!("{prefix}.b"),
            Tensor::new(vec![cout], vec![0.0; cout]).expect("conv bias"),
        );
        ConvParams { w, b }
    }
}

#[derive(Debug, Clone)]
struct FfnParams {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln_gain: ParamId,
    ln_bias: ParamId,
}

impl FfnParams {
    fn init(store: &mut ParamStore, prefix: &str, d: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        FfnParams {
            w1: store.register(format!("{prefix}.w1"), fan_in_uniform(&[d, hidden], rng)),
            b1: store.register(
                format!("{prefix}.b1"),
                Tensor::new(vec![hidden], vec![0.0; hidden]).unwrap(),
            ),
            w2: store.register(format!("{prefix}.w2"), fan_in_uniform(&[hidden, d], rng)),
            b2: store.register(format!("{prefix}.b2"), Tensor::new(vec![d], vec![0.0; d]).unwrap()),
            ln_gain: store.register(
                format!("{prefix}.ln_gain"),
                Tensor::new(vec![d], vec![1.0; d]).unwrap(),
            ),
            ln_bias: store.register(
                format!("{prefix}.ln_bias"),
                Tensor::new(vec![d], vec![0.0; d]).unwrap(),
            ),
        }
    }
}

/// Two linear layers with a ReLU between, residual connection, layer norm.
fn ffn_block(ctx: &mut ForwardCtx, x: Var, p: &FfnParams) -> Result<Var> {
    let h = ctx.tape.linear(x, ctx.var(p.w1), ctx.var(p.b1))?;
    let h = ctx.tape.relu(h);
    let y = ctx.tape.linear(h, ctx.var(p.w2), ctx.var(p.b2))?;
    let sum = ctx.tape.add(x, y)?;
    ctx.tape
        .layer_norm(sum, ctx.var(p.ln_gain), ctx.var(p.ln_bias), LAYER_NORM_EPS)
}

/// Three linear layers with ReLU activations between them.
#[derive(Debug, Clone)]
struct Mlp3Params {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    w3: ParamId,
    b3: ParamId,
}

impl Mlp3Params {
    fn init(
        store: &mut ParamStore,
        prefix: &str,
        dims: [usize; 4],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut lin = |store: &mut ParamStore, name: String, i: usize, o: usize| {
            (
                store.register(format!("{name}.w"), fan_in_uniform(&[i, o], rng)),
                store.register(format!("{name}.b"), Tensor::new(vec![o], vec![0.0; o]).unwrap()),
            )
        };
        let (w1, b1) = lin(store, format!("{prefix}.0"), dims[0], dims[1]);
        let (w2, b2) = lin(store, format!("{prefix}.1"), dims[1], dims[2]);
        let (w3, b3) = lin(store, format!("{prefix}.2"), dims[2], dims[3]);
        Mlp3Params {
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
        }
    }
}

fn mlp3(ctx: &mut ForwardCtx, x: Var, p: &Mlp3Params) -> Result<Var> {
    let h1 = ctx.tape.linear(x, ctx.var(p.w1), ctx.var(p.b1))?;
    let h1 = ctx.tape.relu(h1);
    let h2 = ctx.tape.linear(h1, ctx.var(p.w2), ctx.var(p.b2))?;
    let h2 = ctx.tape.relu(h2);
    ctx.tape.linear(h2, ctx.var(p.w3), ctx.var(p.b3))
}

#[derive(Debug, Clone)]
struct StemParams {
    conv1: ConvParams,
    conv2: ConvParams,
    proj: ConvParams,
}

#[derive(Debug, Clone)]
struct EncoderLayerParams {
    self_att: AttentionParams,
    ffn: FfnParams,
}

#[derive(Debug, Clone)]
struct EntityLayerParams {
    self_att: AttentionParams,
    cross_att: AttentionParams,
    ffn: FfnParams,
}

#[derive(Debug, Clone)]
struct TripletLayerParams {
    csa: Option<AttentionParams>,
    dva_sub: Option<AttentionParams>,
    dva_obj: Option<AttentionParams>,
    dea_sub: Option<AttentionParams>,
    dea_obj: Option<AttentionParams>,
    ffn_sub: FfnParams,
    ffn_obj: FfnParams,
}

#[derive(Debug, Clone)]
struct HeadParams {
    ent_cls_w: ParamId,
    ent_cls_b: ParamId,
    ent_box: Mlp3Params,
    sub_cls_w: ParamId,
    sub_cls_b: ParamId,
    obj_cls_w: ParamId,
    obj_cls_b: ParamId,
    sub_box: Mlp3Params,
    obj_box: Mlp3Params,
    mask_convs: Option<[ConvParams; 3]>,
    prd_mlp: Mlp3Params,
}

#[derive(Debug, Clone)]
struct EncodingParams {
    /// Learned per-slot triplet encodings.
    e_t: ParamId,
    /// Learned subject / object role encodings, one d-vector each,
    /// broadcast over slots.
    e_s: ParamId,
    e_o: ParamId,
    entity_embed: ParamId,
    q_s0: ParamId,
    q_o0: ParamId,
}

pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    stem: StemParams,
    enc_layers: Vec<EncoderLayerParams>,
    ent_layers: Vec<EntityLayerParams>,
    tri_layers: Vec<TripletLayerParams>,
    heads: HeadParams,
    encodings: EncodingParams,
    pos_encoding: Tensor,
}

fn normal_init(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    // Box-Muller from the seeded stream.
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen();
            std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let d = config.model_dim;
        let h = config.head_count;
        let drop = config.dropout;

        let c1 = (d / 4).max(4);
        let c2 = (d / 2).max(8);
        let stem = StemParams {
            conv1: ConvParams::init(&mut store, "stem.conv1", c1, 3, 3, rng),
            conv2: ConvParams::init(&mut store, "stem.conv2", c2, c1, 3, rng),
            proj: ConvParams::init(&mut store, "stem.proj", d, c2, 1, rng),
        };

        let enc_layers = (0..config.encoder_layers)
            .map(|l| {
                Ok(EncoderLayerParams {
                    self_att: AttentionParams::init(
                        &mut store,
                        &format!("encoder.{l}.self"),
                        d,
                        h,
                        drop,
                        rng,
                    )?,
                    ffn: FfnParams::init(&mut store, &format!("encoder.{l}.ffn"), d, config.ffn_dim, rng),
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let ent_layers = (0..config.decoder_layers)
            .map(|l| {
                Ok(EntityLayerParams {
                    self_att: AttentionParams::init(
                        &mut store,
                        &format!("entity_dec.{l}.self"),
                        d,
                        h,
                        drop,
                        rng,
                    )?,
                    cross_att: AttentionParams::init(
                        &mut store,
                        &format!("entity_dec.{l}.cross"),
                        d,
                        h,
                        drop,
                        rng,
                    )?,
                    ffn: FfnParams::init(
                        &mut store,
                        &format!("entity_dec.{l}.ffn"),
                        d,
                        config.ffn_dim,
                        rng,
                    ),
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let ab = config.ablation;
        let tri_layers = (0..config.decoder_layers)
            .map(|l| {
                let att = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: String, on: bool| {
                    if on {
                        AttentionParams::init(store, &name, d, h, drop, rng).map(Some)
                    } else {
                        Ok(None)
                    }
                };
                Ok(TripletLayerParams {
                    csa: att(&mut store, rng, format!("triplet_dec.{l}.csa"), ab.csa)?,
                    dva_sub: att(&mut store, rng, format!("triplet_dec.{l}.dva_sub"), ab.dva)?,
                    dva_obj: att(&mut store, rng, format!("triplet_dec.{l}.dva_obj"), ab.dva)?,
                    dea_sub: att(&mut store, rng, format!("triplet_dec.{l}.dea_sub"), ab.dea)?,
                    dea_obj: att(&mut store, rng, format!("triplet_dec.{l}.dea_obj"), ab.dea)?,
                    ffn_sub: FfnParams::init(
                        &mut store,
                        &format!("triplet_dec.{l}.ffn_sub"),
                        d,
                        config.ffn_dim,
                        rng,
                    ),
                    ffn_obj: FfnParams::init(
                        &mut store,
                        &format!("triplet_dec.{l}.ffn_obj"),
                        d,
                        config.ffn_dim,
                        rng,
                    ),
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let ce = config.entity_classes + 1;
        let cp = config.predicate_classes + 1;
        let d_spa = config.spatial_dim();
        let prd_in = if ab.mask { 2 * d + d_spa } else { 2 * d };
        let prd_hidden = 2 * d;
        let heads = HeadParams {
            ent_cls_w: store.register("heads.ent_cls.w", fan_in_uniform(&[d, ce], rng)),
            ent_cls_b: store.register(
                "heads.ent_cls.b",
                Tensor::new(vec![ce], vec![0.0; ce]).unwrap(),
            ),
            ent_box: Mlp3Params::init(&mut store, "heads.ent_box", [d, d, d, 4], rng),
            sub_cls_w: store.register("heads.sub_cls.w", fan_in_uniform(&[d, ce], rng)),
            sub_cls_b: store.register(
                "heads.sub_cls.b",
                Tensor::new(vec![ce], vec![0.0; ce]).unwrap(),
            ),
            obj_cls_w: store.register("heads.obj_cls.w", fan_in_uniform(&[d, ce], rng)),
            obj_cls_b: store.register(
                "heads.obj_cls.b",
                Tensor::new(vec![ce], vec![0.0; ce]).unwrap(),
            ),
            sub_box: Mlp3Params::init(&mut store, "heads.sub_box", [d, d, d, 4], rng),
            obj_box: Mlp3Params::init(&mut store, "heads.obj_box", [d, d, d, 4], rng),
            mask_convs: if ab.mask {
                Some([
                    ConvParams::init(&mut store, "heads.mask.0", MASK_CHANNELS[0], 2, 3, rng),
                    ConvParams::init(
                        &mut store,
                        "heads.mask.1",
                        MASK_CHANNELS[1],
                        MASK_CHANNELS[0],
                        3,
                        rng,
                    ),
                    ConvParams::init(
                        &mut store,
                        "heads.mask.2",
                        MASK_CHANNELS[2],
                        MASK_CHANNELS[1],
                        3,
                        rng,
                    ),
                ])
            } else {
                None
            },
            prd_mlp: Mlp3Params::init(
                &mut store,
                "heads.prd_mlp",
                [prd_in, prd_hidden, prd_hidden, cp],
                rng,
            ),
        };

        let nt = config.triplet_queries;
        let encodings = EncodingParams {
            e_t: store.register("enc.e_t", normal_init(&[nt, d], 0.02, rng)),
            e_s: store.register("enc.e_s", normal_init(&[d], 0.02, rng)),
            e_o: store.register("enc.e_o", normal_init(&[d], 0.02, rng)),
            entity_embed: store.register(
                "enc.entity_embed",
                normal_init(&[config.entity_queries, d], 0.02, rng),
            ),
            q_s0: store.register("enc.q_s0", normal_init(&[nt, d], 0.02, rng)),
            q_o0: store.register("enc.q_o0", normal_init(&[nt, d], 0.02, rng)),
        };

        let pos_encoding = positional_encoding(config.grid_h(), config.grid_w(), d)?;
        Ok(Model {
            config,
            store,
            stem,
            enc_layers,
            ent_layers,
            tri_layers,
            heads,
            encodings,
            pos_encoding,
        })
    }

    pub fn positional(&self) -> &Tensor {
        &self.pos_encoding
    }
}

/// Two stride-2 convolution+ReLU stages then a 1×1 projection; a `[3, s, s]`
/// image becomes an `[s/4, s/4, d]` feature map.
pub fn stem_forward(ctx: &mut ForwardCtx, model: &Model, image: Var) -> Result<Var> {
    let shape = ctx.tape.value(image).shape.clone();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::Shape(format!("stem: expected [3, h, w] image, got {shape:?}")));
    }
    if shape[1] % 4 != 0 || shape[2] % 4 != 0 {
        return Err(Error::Shape(format!(
            "stem: image extents {}x{} not divisible by 4",
            shape[1], shape[2]
        )));
    }
    let s = &model.stem;
    let c1 = ctx
        .tape
        .conv2d(image, ctx.var(s.conv1.w), ctx.var(s.conv1.b), 2, 1)?;
    let c1 = ctx.tape.relu(c1);
    let c2 = ctx
        .tape
        .conv2d(c1, ctx.var(s.conv2.w), ctx.var(s.conv2.b), 2, 1)?;
    let c2 = ctx.tape.relu(c2);
    let proj = ctx
        .tape
        .conv2d(c2, ctx.var(s.proj.w), ctx.var(s.proj.b), 1, 0)?;
    let rows = ctx.tape.channels_to_rows(proj)?;
    let (h, w) = (shape[1] / 4, shape[2] / 4);
    ctx.tape.reshape(rows, vec![h, w, model.config.model_dim])
}

/// Self-attention stack over the flattened feature map.
pub fn encoder_forward(ctx: &mut ForwardCtx, model: &Model, z0: Var, e_p: Var) -> Result<Var> {
    let mut z = z0;
    for layer in &model.enc_layers {
        let q = ctx.tape.add(z, e_p)?;
        z = att_block(ctx, q, q, z, z, &layer.self_att)?.out;
        z = ffn_block(ctx, z, &layer.ffn)?;
    }
    Ok(z)
}

/// Entity decoder: per layer, self-attention among the entity slots with the
/// learned query embeddings added to Q and K, cross-attention into the
/// encoded image, then the feed-forward block. Returns every layer's output.
pub fn entity_decoder_forward(
    ctx: &mut ForwardCtx,
    model: &Model,
    z: Var,
    e_p: Var,
) -> Result<Vec<Var>> {
    let qe = ctx.var(model.encodings.entity_embed);
    let mut tgt = ctx.tape.leaf(Tensor::zeros(vec![
        model.config.entity_queries,
        model.config.model_dim,
    ]));
    let mut outputs = Vec::with_capacity(model.ent_layers.len());
    for layer in &model.ent_layers {
        let q = ctx.tape.add(tgt, qe)?;
        tgt = att_block(ctx, q, q, tgt, tgt, &layer.self_att)?.out;
        let q2 = ctx.tape.add(tgt, qe)?;
        let k2 = ctx.tape.add(z, e_p)?;
        tgt = att_block(ctx, q2, k2, z, tgt, &layer.cross_att)?.out;
        tgt = ffn_block(ctx, tgt, &layer.ffn)?;
        outputs.push(tgt);
    }
    Ok(outputs)
}

/// Coupled self-attention over the concatenated subject and object slots.
pub fn csa(
    ctx: &mut ForwardCtx,
    params: Option<&AttentionParams>,
    q_s: Var,
    q_o: Var,
    e_s: Var,
    e_o: Var,
    e_t: Var,
) -> Result<(Var, Var)> {
    let Some(params) = params else {
        return Ok((q_s, q_o));
    };
    let n_t = ctx.tape.value(q_s).shape[0];
    let s_enc = {
        let with_t = ctx.tape.add(q_s, e_t)?;
        ctx.tape.add_bias(with_t, e_s)?
    };
    let o_enc = {
        let with_t = ctx.tape.add(q_o, e_t)?;
        ctx.tape.add_bias(with_t, e_o)?
    };
    let coupled_q = ctx.tape.concat(&[s_enc, o_enc], 0)?;
    let coupled_v = ctx.tape.concat(&[q_s, q_o], 0)?;
    let out = att_block(ctx, coupled_q, coupled_q, coupled_v, coupled_v, params)?;
    let new_s = ctx.tape.narrow(out.out, 0, 0, n_t)?;
    let new_o = ctx.tape.narrow(out.out, 0, n_t, n_t)?;
    Ok((new_s, new_o))
}

/// Decoupled visual attention for one branch: cross-attention from the
/// branch queries into the feature context. Returns the updated queries and
/// the head-mean heat map rows.
pub fn dva(
    ctx: &mut ForwardCtx,
    params: Option<&AttentionParams>,
    q_x: Var,
    e_t: Var,
    z: Var,
    e_p: Var,
) -> Result<(Var, Var)> {
    let hw = ctx.tape.value(z).shape[0];
    let Some(params) = params else {
        let n_t = ctx.tape.value(q_x).shape[0];
        let uniform = ctx
            .tape
            .leaf(Tensor::new(vec![n_t, hw], vec![1.0 / hw as f64; n_t * hw])?);
        return Ok((q_x, uniform));
    };
    let q = ctx.tape.add(q_x, e_t)?;
    let k = ctx.tape.add(z, e_p)?;
    let out = att_block(ctx, q, k, z, q_x, params)?;
    Ok((out.out, out.weights))
}

/// Decoupled entity attention for one branch: cross-attention from the
/// branch queries into the entity-decoder representations.
pub fn dea(
    ctx: &mut ForwardCtx,
    params: Option<&AttentionParams>,
    q_x: Var,
    e_t: Var,
    q_e: Var,
) -> Result<Var> {
    let Some(params) = params else {
        return Ok(q_x);
    };
    let q = ctx.tape.add(q_x, e_t)?;
    Ok(att_block(ctx, q, q_e, q_e, q_x, params)?.out)
}

/// Per-layer raw decoder streams before the heads.
pub struct TripletLayerState {
    pub q_s: Var,
    pub q_o: Var,
    pub m_s: Var,
    pub m_o: Var,
}

/// Run the triplet decoder, recording every layer's subject/object streams
/// and heat maps.
pub fn triplet_decoder_forward(
    ctx: &mut ForwardCtx,
    model: &Model,
    z: Var,
    e_p: Var,
    entity_layers: &[Var],
) -> Result<Vec<TripletLayerState>> {
    let e_t = ctx.var(model.encodings.e_t);
    let e_s = ctx.var(model.encodings.e_s);
    let e_o = ctx.var(model.encodings.e_o);
    let mut q_s = ctx.var(model.encodings.q_s0);
    let mut q_o = ctx.var(model.encodings.q_o0);
    let mut outputs = Vec::with_capacity(model.tri_layers.len());
    for (l, layer) in model.tri_layers.iter().enumerate() {
        let (s1, o1) = csa(ctx, layer.csa.as_ref(), q_s, q_o, e_s, e_o, e_t)?;
        let (s2, m_s) = dva(ctx, layer.dva_sub.as_ref(), s1, e_t, z, e_p)?;
        let (o2, m_o) = dva(ctx, layer.dva_obj.as_ref(), o1, e_t, z, e_p)?;
        let q_e = if model.config.dea_final_layer_only {
            entity_layers[entity_layers.len() - 1]
        } else {
            entity_layers[l]
        };
        let s3 = dea(ctx, layer.dea_sub.as_ref(), s2, e_t, q_e)?;
        let o3 = dea(ctx, layer.dea_obj.as_ref(), o2, e_t, q_e)?;
        q_s = ffn_block(ctx, s3, &layer.ffn_sub)?;
        q_o = ffn_block(ctx, o3, &layer.ffn_obj)?;
        outputs.push(TripletLayerState {
            q_s,
            q_o,
            m_s,
            m_o,
        });
    }
    Ok(outputs)
}

/// Convolutional stack over one slot's stacked subject/object heat maps,
/// flattened to the spatial feature vector.
fn mask_head(
    ctx: &mut ForwardCtx,
    convs: &[ConvParams; 3],
    m_s_slot: Var,
    m_o_slot: Var,
    d_spa: usize,
) -> Result<Var> {
    let res = ctx.tape.value(m_s_slot).shape[0];
    let s3 = ctx.tape.reshape(m_s_slot, vec![1, res, res])?;
    let o3 = ctx.tape.reshape(m_o_slot, vec![1, res, res])?;
    let stacked = ctx.tape.concat(&[s3, o3], 0)?;
    let mut x = stacked;
    for conv in convs {
        x = ctx.tape.conv2d(x, ctx.var(conv.w), ctx.var(conv.b), 2, 1)?;
        x = ctx.tape.relu(x);
    }
    ctx.tape.reshape(x, vec![d_spa])
}

/// One decoder layer's head outputs, still on the tape.
pub struct LayerTripletVars {
    pub sub_logits: Var,
    pub sub_boxes: Var,
    pub obj_logits: Var,
    pub obj_boxes: Var,
    pub prd_logits: Var,
    pub m_s: Var,
    pub m_o: Var,
}

pub struct LayerEntityVars {
    pub logits: Var,
    pub boxes: Var,
}

pub struct ModelOutput {
    pub entity_layers: Vec<LayerEntityVars>,
    pub triplet_layers: Vec<LayerTripletVars>,
    pub grid_h: usize,
    pub grid_w: usize,
}

/// Class, box and predicate heads over one triplet decoder layer's streams.
pub fn heads_forward(
    ctx: &mut ForwardCtx,
    model: &Model,
    state: &TripletLayerState,
) -> Result<LayerTripletVars> {
    let heads = &model.heads;
    let n_t = model.config.triplet_queries;
    let sub_logits = ctx
        .tape
        .linear(state.q_s, ctx.var(heads.sub_cls_w), ctx.var(heads.sub_cls_b))?;
    let obj_logits = ctx
        .tape
        .linear(state.q_o, ctx.var(heads.obj_cls_w), ctx.var(heads.obj_cls_b))?;
    let sub_box_raw = mlp3(ctx, state.q_s, &heads.sub_box)?;
    let sub_boxes = ctx.tape.sigmoid(sub_box_raw);
    let obj_box_raw = mlp3(ctx, state.q_o, &heads.obj_box)?;
    let obj_boxes = ctx.tape.sigmoid(obj_box_raw);

    let prd_in = if let Some(convs) = &heads.mask_convs {
        let res = model.config.mask_resolution;
        let d_spa = model.config.spatial_dim();
        let grid_h = model.config.grid_h();
        let grid_w = model.config.grid_w();
        let mut spa_rows = Vec::with_capacity(n_t);
        for slot in 0..n_t {
            let ms_row = ctx.tape.narrow(state.m_s, 0, slot, 1)?;
            let ms_grid = ctx.tape.reshape(ms_row, vec![grid_h, grid_w])?;
            let ms_res = ctx.tape.bilinear_resize(ms_grid, res, res)?;
            let mo_row = ctx.tape.narrow(state.m_o, 0, slot, 1)?;
            let mo_grid = ctx.tape.reshape(mo_row, vec![grid_h, grid_w])?;
            let mo_res = ctx.tape.bilinear_resize(mo_grid, res, res)?;
            let v_spa = mask_head(ctx, convs, ms_res, mo_res, d_spa)?;
            let row = ctx.tape.reshape(v_spa, vec![1, d_spa])?;
            spa_rows.push(row);
        }
        let v_spa_mat = ctx.tape.concat(&spa_rows, 0)?;
        ctx.tape.concat(&[state.q_s, state.q_o, v_spa_mat], 1)?
    } else {
        ctx.tape.concat(&[state.q_s, state.q_o], 1)?
    };
    let prd_logits = mlp3(ctx, prd_in, &heads.prd_mlp)?;
    Ok(LayerTripletVars {
        sub_logits,
        sub_boxes,
        obj_logits,
        obj_boxes,
        prd_logits,
        m_s: state.m_s,
        m_o: state.m_o,
    })
}

impl Model {
    /// Full forward pass over one image, producing every decoder layer's
    /// entity and triplet head outputs.
    pub fn forward(
        &self,
        ctx: &mut ForwardCtx,
        image: &Tensor,
    ) -> Result<ModelOutput> {
        let img = ctx.tape.leaf(image.clone());
        let feat = stem_forward(ctx, self, img)?;
        let (h, w) = (self.config.grid_h(), self.config.grid_w());
        let z0 = ctx.tape.reshape(feat, vec![h * w, self.config.model_dim])?;
        let e_p = ctx.tape.leaf(self.pos_encoding.clone());
        let z = encoder_forward(ctx, self, z0, e_p)?;
        let entity_streams = entity_decoder_forward(ctx, self, z, e_p)?;
        let triplet_streams = triplet_decoder_forward(ctx, self, z, e_p, &entity_streams)?;

        let mut entity_layers = Vec::with_capacity(entity_streams.len());
        for &q_e in &entity_streams {
            let logits = ctx
                .tape
                .linear(q_e, ctx.var(self.heads.ent_cls_w), ctx.var(self.heads.ent_cls_b))?;
            let raw = mlp3(ctx, q_e, &self.heads.ent_box)?;
            let boxes = ctx.tape.sigmoid(raw);
            entity_layers.push(LayerEntityVars { logits, boxes });
        }
        let mut triplet_layers = Vec::with_capacity(triplet_streams.len());
        for state in &triplet_streams {
            triplet_layers.push(heads_forward(ctx, self, state)?);
        }
        Ok(ModelOutput {
            entity_layers,
            triplet_layers,
            grid_h: h,
            grid_w: w,
        })
    }
}

impl ModelOutput {
    pub fn layers(&self) -> usize {
        self.triplet_layers.len()
    }

    /// Extract one layer's triplet predictions as plain values.
    pub fn layer_triplets(&self, tape: &Tape, layer: usize) -> Vec<TripletPrediction> {
        let l = &self.triplet_layers[layer];
        let sub_logits = tape.value(l.sub_logits);
        let obj_logits = tape.value(l.obj_logits);
        let prd_logits = tape.value(l.prd_logits);
        let sub_boxes = tape.value(l.sub_boxes);
        let obj_boxes = tape.value(l.obj_boxes);
        let m_s = tape.value(l.m_s);
        let m_o = tape.value(l.m_o);
        let n_t = sub_logits.shape[0];
        let ce = sub_logits.shape[1];
        let cp = prd_logits.shape[1];
        let hw = m_s.shape[1];
        (0..n_t)
            .map(|i| {
                let bx = |t: &Tensor| {
                    BBox::new(
                        t.data[i * 4],
                        t.data[i * 4 + 1],
                        t.data[i * 4 + 2].max(1e-6),
                        t.data[i * 4 + 3].max(1e-6),
                    )
                };
                TripletPrediction {
                    subject_logits: sub_logits.data[i * ce..(i + 1) * ce].to_vec(),
                    subject_box: bx(sub_boxes),
                    object_logits: obj_logits.data[i * ce..(i + 1) * ce].to_vec(),
                    object_box: bx(obj_boxes),
                    predicate_logits: prd_logits.data[i * cp..(i + 1) * cp].to_vec(),
                    subject_heatmap: m_s.data[i * hw..(i + 1) * hw].to_vec(),
                    object_heatmap: m_o.data[i * hw..(i + 1) * hw].to_vec(),
                }
            })
            .collect()
    }

    /// Extract one layer's entity predictions as (logits, box) pairs.
    pub fn layer_entities(&self, tape: &Tape, layer: usize) -> Vec<(Vec<f64>, BBox)> {
        let l = &self.entity_layers[layer];
        let logits = tape.value(l.logits);
        let boxes = tape.value(l.boxes);
        let n = logits.shape[0];
        let ce = logits.shape[1];
        (0..n)
            .map(|i| {
                (
                    logits.data[i * ce..(i + 1) * ce].to_vec(),
                    BBox::new(
                        boxes.data[i * 4],
                        boxes.data[i * 4 + 1],
                        boxes.data[i * 4 + 2].max(1e-6),
                        boxes.data[i * 4 + 3].max(1e-6),
                    ),
                )
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            model_dim: 8,
            head_count: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            entity_queries: 3,
            triplet_queries: 4,
            entity_classes: 5,
            predicate_classes: 4,
            dropout: 0.0,
            mask_resolution: 28,
            image_size: 16,
            ffn_dim: 16,
            ablation: Ablation::default(),
            dea_final_layer_only: false,
        }
    }

    fn rand_image(size: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..3 * size * size).map(|_| rng.gen::<f64>()).collect();
        Tensor::new(vec![3, size, size], data).unwrap()
    }

    #[test]
    fn positional_encoding_properties() {
        let pe = positional_encoding(4, 5, 8).unwrap();
        assert_eq!(pe.shape, vec![20, 8]);
        // Origin: sin channels 0, cos channels 1.
        for i in 0..2 {
            assert_eq!(pe.data[2 * i], 0.0);
            assert_eq!(pe.data[2 * i + 1], 1.0);
            assert_eq!(pe.data[4 + 2 * i], 0.0);
            assert_eq!(pe.data[4 + 2 * i + 1], 1.0);
        }
        // Determinism.
        assert_eq!(pe.data, positional_encoding(4, 5, 8).unwrap().data);
        // Row channels constant along each row.
        for y in 0..4 {
            for x in 1..5 {
                for c in 0..4 {
                    assert_eq!(
                        pe.data[(y * 5 + x) * 8 + c],
                        pe.data[(y * 5) * 8 + c],
                        "row channel varies along width"
                    );
                }
            }
        }
        assert!(positional_encoding(2, 2, 6).is_err());
    }

    #[test]
    fn stem_shape_contract() {
        let mut cfg = tiny_config();
        cfg.image_size = 32;
        cfg.model_dim = 64;
        cfg.head_count = 4;
        let model = Model::new(cfg, 1).unwrap();
        let image = rand_image(32, 2);
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape);
        let mut ctx = ForwardCtx::eval(&mut tape, &bound);
        let img = ctx.tape.leaf(image);
        let feat = stem_forward(&mut ctx, &model, img).unwrap();
        assert_eq!(tape.value(feat).shape, vec![8, 8, 64]);
    }

    #[test]
    fn stem_rejects_unaligned_extents() {
        let model = Model::new(tiny_config(), 1).unwrap();
        let image = Tensor::zeros(vec![3, 18, 16]);
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape);
        let mut ctx = ForwardCtx::eval(&mut tape, &bound);
        let img = ctx.tape.leaf(image);
        assert!(stem_forward(&mut ctx, &model, img).is_err());
    }

    #[test]
    fn zero_image_zero_bias_stem_gives_zero_features() {
        let model = Model::new(tiny_config(), 3).unwrap();
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape);
        let mut ctx = ForwardCtx::eval(&mut tape, &bound);
        let img = ctx.tape.leaf(Tensor::zeros(vec![3, 16, 16]));
        let feat = stem_forward(&mut ctx, &model, img).unwrap();
        // Biases start at zero, so a zero image stays exactly zero.
        assert!(tape.value(feat).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_encoder_layers_is_identity() {
        let mut cfg = tiny_config();
        cfg.encoder_layers = 0;
        let model = Model::new(cfg, 4).unwrap();
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape);
        let mut ctx = ForwardCtx::eval(&mut tape, &bound);
        let z0 = ctx.tape.leaf(Tensor::new(
            vec![16, 8],
            (0..128).map(|i| i as f64 * 0.01).collect(),
        ).unwrap());
        let e_p = ctx.tape.leaf(model.positional().clone());
        let z = encoder_forward(&mut ctx, &model, z0, e_p).unwrap();
        assert_eq!(z, z0);
    }

    #[test]
    fn forward_shapes_and_layer_counts() {
        let cfg = tiny_config();
        let model = Model::new(cfg.clone(), 5).unwrap();
        let image = rand_image(cfg.image_size, 6);
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape);
        let mut ctx = ForwardCtx::eval(&mut tape, &bound);
        let out = model.forward(&mut ctx, &image).unwrap();
        assert_eq!(out.entity_layers.len(), cfg.decoder_layers);
        assert_eq!(out.triplet_layers.len(), cfg.decoder_layers);
        let hw = cfg.grid_h() * cfg.grid_w();
        for l in 0..cfg.decoder_layers {
            let t = &out.triplet_layers[l];
            assert_eq!(
                tape.value(t.sub_logits).shape,
                vec![cfg.triplet_queries, cfg.entity_classes + 1]
            );
            assert_eq!(tape.value(t.sub_boxes).shape, vec![cfg.triplet_queries, 4]);
            assert_eq!(
                tape.value(t.prd_logits).shape,
                vec![cfg.triplet_queries, cfg.predicate_classes + 1]
            );
            assert_eq!(tape.value(t.m_s).shape, vec![cfg.triplet_queries, hw]);
            let e = &out.entity_layers[l];
            assert_eq!(
                tape.value(e.logits).shape,
                vec![cfg.entity_queries, cfg.entity_classes + 1]
            );
            // Boxes squashed into (0, 1).
            assert!(tape
                .value(t.sub_boxes)
                .data
                .iter()
                .all(|&v| (0.0..=1.0).contains(&v)));
        }
        let preds = out.layer_triplets(&tape, cfg.decoder_layers - 1);
        assert_eq!(preds.len(), cfg.triplet_queries);
        // Heat map rows are stochastic.
        for p in &preds {
            let s: f64 = p.subject_heatmap.iter().sum();
            assert!((s - 1.0).abs() < 1e-9, "{s}");
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let cfg = tiny_config();
        let model = Model::new(cfg.clone(), 7).unwrap();
        let image = rand_image(cfg.image_size, 8);
        let run = || {
            let mut tape = Tape::new();
            let bound = model.store.bind(&mut tape);
            let mut ctx = ForwardCtx::eval(&mut tape, &bound);
            let out = model.forward(&mut ctx, &image).unwrap();
            let l = out.layers() - 1;
            (
                tape.value(out.triplet_layers[l].prd_logits).data.clone(),
                tape.value(out.entity_layers[l].boxes).data.clone(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn slot_permutation_permutes_predictions() {
        let cfg = tiny_config();
        let mut model = Model::new(cfg.clone(), 9).unwrap();
        let image = rand_image(cfg.image_size, 10);
        let run = |model: &Model| {
            let mut tape = Tape::new();
            let bound = model.store.bind(&mut tape);
            let mut ctx = ForwardCtx::eval(&mut tape, &bound);
            let out = model.forward(&mut ctx, &image).unwrap();
            out.layer_triplets(&tape, cfg.decoder_layers - 1)
        };
        let base = run(&model);
        let perm = [2usize, 0, 3, 1];
        let d = cfg.model_dim;
        for name in ["enc.e_t", "enc.q_s0", "enc.q_o0"] {
            let id = model
                .store
                .ids()
                .find(|&i| model.store.name(i) == name)
                .unwrap();
            let orig = model.store.get(id).clone();
            let t = model.store.get_mut(id);
            for (dst, &src) in perm.iter().enumerate() {
                t.data[dst * d..(dst + 1) * d].copy_from_slice(&orig.data[src * d..(src + 1) * d]);
            }
        }
        let permuted = run(&model);
        for (dst, &src) in perm.iter().enumerate() {
            for (a, b) in permuted[dst]
                .predicate_logits
                .iter()
                .zip(&base[src].predicate_logits)
            {
                assert!((a - b).abs() < 1e-8, "{a} vs {b}");
            }
            assert!((permuted[dst].subject_box.cx - base[src].subject_box.cx).abs() < 1e-8);
        }
    }

    #[test]
    fn ablated_modules_preserve_contracts() {
        let mut cfg = tiny_config();
        cfg.ablation = Ablation {
            csa: false,
            dva: false,
            dea: false,
            mask: false,
        };
        let model = Model::new(cfg.clone(), 11).unwrap();
        let image = rand_image(cfg.image_size, 12);
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape);
        let mut ctx = ForwardCtx::eval(&mut tape, &bound);
        let out = model.forward(&mut ctx, &image).unwrap();
        // With every cross-attention off, outputs are image-independent.
        let image2 = rand_image(cfg.image_size, 13);
        let mut tape2 = Tape::new();
        let bound2 = model.store.bind(&mut tape2);
        let mut ctx2 = ForwardCtx::eval(&mut tape2, &bound2);
        let out2 = model.forward(&mut ctx2, &image2).unwrap();
        assert_eq!(
            tape.value(out.triplet_layers[0].prd_logits).data,
            tape2.value(out2.triplet_layers[0].prd_logits).data
        );
        // Uniform heat maps still row-stochastic.
        for row in tape.value(out.triplet_layers[0].m_s).data.chunks(16) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_requires_dva() {
        let mut cfg = tiny_config();
        cfg.ablation.dva = false;
        assert!(Model::new(cfg, 1).is_err());
    }

    #[test]
    fn csa_hand_sized_matches_composition() {
        // N_t = 1: the coupled rows attend over subject+object only.
        let mut cfg = tiny_config();
        cfg.triplet_queries = 1;
        let model = Model::new(cfg, 14).unwrap();
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape);
        let mut ctx = ForwardCtx::eval(&mut tape, &bound);
        let q_s = ctx.var(model.encodings.q_s0);
        let q_o = ctx.var(model.encodings.q_o0);
        let e_t = ctx.var(model.encodings.e_t);
        let e_s = ctx.var(model.encodings.e_s);
        let e_o = ctx.var(model.encodings.e_o);
        let (s, o) = csa(
            &mut ctx,
            model.tri_layers[0].csa.as_ref(),
            q_s,
            q_o,
            e_s,
            e_o,
            e_t,
        )
        .unwrap();
        assert_eq!(tape.value(s).shape, vec![1, 8]);
        assert_eq!(tape.value(o).shape, vec![1, 8]);
    }

    #[test]
    fn dea_single_entity_attends_fully() {
        let mut cfg = tiny_config();
        cfg.entity_queries = 1;
        let model = Model::new(cfg.clone(), 15).unwrap();
        let image = rand_image(cfg.image_size, 16);
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape);
        let mut ctx = ForwardCtx::eval(&mut tape, &bound);
        // Forward must work with a single entity slot.
        let out = model.forward(&mut ctx, &image).unwrap();
        assert_eq!(tape.value(out.entity_layers[0].logits).shape[0], 1);
    }

    #[test]
    fn stem_gradients_match_finite_differences() {
        let mut cfg = tiny_config();
        cfg.image_size = 8;
        let model = Model::new(cfg, 17).unwrap();
        let image = rand_image(8, 18);
        let out = grad_check(&model.store, 1e-5, |tape, bound| {
            let mut ctx = ForwardCtx::eval(tape, bound);
            let img = ctx.tape.leaf(image.clone());
            let feat = stem_forward(&mut ctx, &model, img)?;
            let sq = tape.mul(feat, feat)?;
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert!(out.max_rel_error < 1e-4, "{:?}", out.worst);
    }

    #[test]
    fn checkpoint_round_trip_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = Model::new(tiny_config(), 19).unwrap();
        let ckpt = Checkpoint {
            config: model.config.clone(),
            step: 123,
            arrays: model
                .store
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
        };
        save_checkpoint(&path, &ckpt).unwrap();
        let first = std::fs::read(&path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.step, 123);
        assert_eq!(loaded.config, ckpt.config);
        save_checkpoint(&path, &loaded).unwrap();
        let second = std::fs::read(&path).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn model_restores_from_checkpoint() {
        let cfg = tiny_config();
        let model = Model::new(cfg.clone(), 20).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        model.save(&path, 7).unwrap();
        let (restored, step) = Model::load(&path).unwrap();
        assert_eq!(step, 7);
        let image = rand_image(cfg.image_size, 21);
        let run = |m: &Model| {
            let mut tape = Tape::new();
            let bound = m.store.bind(&mut tape);
            let mut ctx = ForwardCtx::eval(&mut tape, &bound);
            let out = m.forward(&mut ctx, &image).unwrap();
            tape.value(out.triplet_layers[0].prd_logits).data.clone()
        };
        assert_eq!(run(&model), run(&restored));
    }
}
