//! Model specifications, construction, inference and weight files.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mammoseg_core::evaluation::{SegmentRequest, Segmenter};
use mammoseg_core::fsutil::write_atomic;
use mammoseg_core::{ProbabilityMaps, NUM_CLASSES};
use ndarray::{Array3, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::decoder::{Decoder, FpnDecoder, LinknetDecoder, PspDecoder, UNetDecoder};
use crate::encoder::{EfficientNetB3, Encoder, SmallEncoder};
use crate::graph::Var;
use crate::params::{Ctx, Init, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("UnsupportedCombination: {0}")]
    UnsupportedCombination(String),
    #[error("SpecMismatch: {0}")]
    SpecMismatch(String),
    #[error("CorruptFile: {0}")]
    CorruptFile(String),
    #[error("input shape {got:?} does not match model input {expected}x{expected}")]
    InputShape { got: (usize, usize), expected: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    UNet,
    Fpn,
    Linknet,
    PspNet,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [Architecture::UNet, Architecture::Fpn, Architecture::Linknet, Architecture::PspNet];

    /// Display name used in report tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Architecture::UNet => "UNet",
            Architecture::Fpn => "FPN",
            Architecture::Linknet => "Linknet",
            Architecture::PspNet => "PSPNet",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

impl FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "unet" => Ok(Architecture::UNet),
            "fpn" => Ok(Architecture::Fpn),
            "linknet" => Ok(Architecture::Linknet),
            "pspnet" | "psp" => Ok(Architecture::PspNet),
            _ => Err(format!("unknown architecture {s:?} (expected unet, fpn, linknet, pspnet)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EncoderKind {
    #[serde(rename = "efficientnet-b3")]
    EfficientNetB3,
    #[serde(rename = "small")]
    Small,
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderKind::EfficientNetB3 => "efficientnet-b3",
            EncoderKind::Small => "small",
        })
    }
}

impl FromStr for EncoderKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "efficientnet-b3" | "efficientnetb3" | "b3" => Ok(EncoderKind::EfficientNetB3),
            "small" => Ok(EncoderKind::Small),
            _ => Err(format!("unknown encoder {s:?} (expected efficientnet-b3, small)")),
        }
    }
}

/// Output stride of both encoders.
pub const ENCODER_STRIDE: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub encoder: EncoderKind,
    pub input_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub pretrained_encoder: bool,
    /// Decoder widths; meaning depends on the architecture (UNet: five block
    /// widths; FPN: pyramid and segmentation widths; Linknet: prefinal width;
    /// PSPNet: fused width).
    pub decoder_channels: Vec<usize>,
    pub init_seed: u64,
}

impl ModelSpec {
    pub fn new(architecture: Architecture, encoder: EncoderKind, input_size: usize) -> Self {
        Self {
            architecture,
            encoder,
            input_size,
            in_channels: 1,
            num_classes: NUM_CLASSES,
            pretrained_encoder: false,
            decoder_channels: default_decoder_channels(architecture, encoder),
            init_seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.init_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::UnsupportedCombination(m));
        if self.input_size == 0 || self.input_size % ENCODER_STRIDE != 0 {
            return bad(format!("input size {} is not a positive multiple of {ENCODER_STRIDE}", self.input_size));
        }
        if self.in_channels != 1 {
            return bad(format!("in_channels must be 1, got {}", self.in_channels));
        }
        if self.num_classes != NUM_CLASSES {
            return bad(format!("num_classes must be {NUM_CLASSES}, got {}", self.num_classes));
        }
        if self.pretrained_encoder {
            return bad("no pretrained encoder weights are bundled".into());
        }
        let expected = default_decoder_channels(self.architecture, self.encoder).len();
        if self.decoder_channels.len() != expected || self.decoder_channels.contains(&0) {
            return bad(format!("{} expects {expected} positive decoder widths, got {:?}", self.architecture, self.decoder_channels));
        }
        Ok(())
    }

    /// True when weights saved under `other` fit this spec's parameter layout.
    fn same_layout(&self, other: &ModelSpec) -> bool {
        self.architecture == other.architecture
            && self.encoder == other.encoder
            && self.input_size == other.input_size
            && self.in_channels == other.in_channels
            && self.num_classes == other.num_classes
            && self.decoder_channels == other.decoder_channels
    }
}

pub fn default_decoder_channels(architecture: Architecture, encoder: EncoderKind) -> Vec<usize> {
    let small = encoder == EncoderKind::Small;
    match architecture {
        Architecture::UNet if small => vec![64, 48, 32, 16, 8],
        Architecture::UNet => vec![256, 128, 64, 32, 16],
        Architecture::Fpn if small => vec![64, 32],
        Architecture::Fpn => vec![256, 128],
        Architecture::Linknet if small => vec![16],
        Architecture::Linknet => vec![32],
        Architecture::PspNet if small => vec![64],
        Architecture::PspNet => vec![512],
    }
}

/// Encoder plus decoder topology; parameters live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    encoder: Encoder,
    decoder: Decoder,
}

impl Network {
    /// Class scores before the softmax, `[N, classes, H, W]`.
    pub fn logits<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let feats = self.encoder.forward(ctx, x, self.decoder.depth());
        self.decoder.forward(ctx, &feats)
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let logits = self.logits(ctx, x);
        ctx.graph.softmax(logits)
    }
}

fn build_network(spec: &ModelSpec) -> (Network, ParamStore<f32>) {
    let mut init = Init::new(ChaCha8Rng::seed_from_u64(spec.init_seed));
    let (encoder, enc) = match spec.encoder {
        EncoderKind::Small => (Encoder::Small(SmallEncoder::new(&mut init, spec.in_channels)), SmallEncoder::channels()),
        EncoderKind::EfficientNetB3 => (
            Encoder::EfficientNetB3(EfficientNetB3::new(&mut init, spec.in_channels)),
            EfficientNetB3::channels(),
        ),
    };
    let d = &spec.decoder_channels;
    let k = spec.num_classes;
    let decoder = match spec.architecture {
        Architecture::UNet => Decoder::UNet(UNetDecoder::new(&mut init, enc, d, k)),
        Architecture::Fpn => Decoder::Fpn(FpnDecoder::new(&mut init, enc, d[0], d[1], k)),
        Architecture::Linknet => Decoder::Linknet(LinknetDecoder::new(&mut init, enc, d[0], k)),
        Architecture::PspNet => Decoder::Psp(PspDecoder::new(&mut init, enc[2], d[0], k)),
    };
    (Network { encoder, decoder }, init.store)
}

#[derive(Clone, Debug)]
pub struct SegmentationModel {
    spec: ModelSpec,
    network: Network,
    pub params: ParamStore<f32>,
}

pub fn build_model(spec: &ModelSpec) -> Result<SegmentationModel, ModelError> {
    spec.validate()?;
    let (network, params) = build_network(spec);
    Ok(SegmentationModel {
        spec: spec.clone(),
        network,
        params,
    })
}

/// Splits a softmax batch into per-image probability maps.
pub fn split_maps(out: &Tensor<f32>) -> Vec<ProbabilityMaps> {
    let [_, c, h, w] = out.shape;
    (0..out.n())
        .map(|i| {
            let planes = Array3::from_shape_vec((c, h, w), out.item(i).to_vec()).expect("item shape");
            ProbabilityMaps::new(planes).expect("softmax output is normalized")
        })
        .collect()
}

/// Stacks `S x S` images into a `[N, 1, S, S]` tensor.
pub fn batch_tensor<T: Real>(inputs: &[ArrayView2<'_, f32>]) -> Tensor<T> {
    let (h, w) = inputs.first().map(|a| a.dim()).unwrap_or((0, 0));
    let mut data = Vec::with_capacity(inputs.len() * h * w);
    for a in inputs {
        assert_eq!(a.dim(), (h, w), "batch images differ in shape");
        data.extend(a.iter().map(|&v| T::from_f64(v as f64)));
    }
    Tensor::from_vec([inputs.len(), 1, h, w], data)
}

impl SegmentationModel {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    /// Trainable scalar count.
    pub fn parameter_count(&self) -> usize {
        self.params.weight_count()
    }

    fn check_inputs(&self, inputs: &[ArrayView2<'_, f32>]) -> Result<(), ModelError> {
        let s = self.spec.input_size;
        match inputs.iter().find(|a| a.dim() != (s, s)) {
            Some(a) => Err(ModelError::InputShape { got: a.dim(), expected: s }),
            None => Ok(()),
        }
    }

    /// Softmax output `[N, classes, S, S]` in inference mode.
    pub fn forward_batch(&self, inputs: &[ArrayView2<'_, f32>]) -> Result<Tensor<f32>, ModelError> {
        self.check_inputs(inputs)?;
        let mut ctx = Ctx::eval(&self.params);
        let x = ctx.graph.input(batch_tensor(inputs), false);
        let y = self.network.forward(&mut ctx, x);
        Ok(ctx.graph.value(y).clone())
    }

    pub fn predict_batch(&self, inputs: &[ArrayView2<'_, f32>]) -> Result<Vec<ProbabilityMaps>, ModelError> {
        Ok(split_maps(&self.forward_batch(inputs)?))
    }

    pub fn save_weights(&self, path: &Path) -> Result<(), ModelError> {
        let bytes = encode_weights(&self.spec, &self.params);
        write_atomic(path, &bytes).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

impl Segmenter for SegmentationModel {
    fn predict(&self, request: SegmentRequest<'_>) -> Result<ProbabilityMaps, String> {
        self.predict_batch(&[request.input])
            .map(|mut v| v.remove(0))
            .map_err(|e| e.to_string())
    }
}

const MAGIC: &[u8; 6] = b"MSEGW\0";
const FORMAT_VERSION: u32 = 1;

fn encode_weights(spec: &ModelSpec, params: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let json = serde_json::to_vec(spec).expect("spec serializes");
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for id in params.ids() {
        let name = params.name(id).as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        let t = params.get(id);
        for d in t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| ModelError::CorruptFile("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parses the header of a weight file without checking it against a spec.
pub fn read_weights_spec(path: &Path) -> Result<ModelSpec, ModelError> {
    let bytes = read_file(path)?;
    let (body, _) = verify_digest(&bytes)?;
    let mut r = Reader { buf: body, pos: 0 };
    read_header(&mut r)
}

fn read_file(path: &Path) -> Result<Vec<u8>, ModelError> {
    std::fs::read(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn verify_digest(bytes: &[u8]) -> Result<(&[u8], ()), ModelError> {
    if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(ModelError::CorruptFile("missing weight-file magic".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(ModelError::CorruptFile("checksum mismatch (truncated or modified)".into()));
    }
    Ok((body, ()))
}

fn read_header(r: &mut Reader<'_>) -> Result<ModelSpec, ModelError> {
    r.take(MAGIC.len())?;
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(ModelError::CorruptFile(format!("unsupported format version {version}")));
    }
    let len = r.u32()? as usize;
    serde_json::from_slice(r.take(len)?).map_err(|e| ModelError::CorruptFile(format!("bad spec header: {e}")))
}

/// Loads weights saved for a spec with the same layout as `spec`.
pub fn load_weights(spec: &ModelSpec, path: &Path) -> Result<SegmentationModel, ModelError> {
    let bytes = read_file(path)?;
    decode_weights(spec, &bytes)
}

fn decode_weights(spec: &ModelSpec, bytes: &[u8]) -> Result<SegmentationModel, ModelError> {
    let (body, _) = verify_digest(bytes)?;
    let mut r = Reader { buf: body, pos: 0 };
    let saved = read_header(&mut r)?;
    if !spec.same_layout(&saved) {
        return Err(ModelError::SpecMismatch(format!(
            "file holds {} / {} at {} (decoder {:?}), requested {} / {} at {} (decoder {:?})",
            saved.architecture,
            saved.encoder,
            saved.input_size,
            saved.decoder_channels,
            spec.architecture,
            spec.encoder,
            spec.input_size,
            spec.decoder_channels
        )));
    }
    let mut model = build_model(&saved)?;
    let count = r.u32()? as usize;
    if count != model.params.len() {
        return Err(ModelError::CorruptFile(format!("expected {} tensors, found {count}", model.params.len())));
    }
    for id in model.params.ids().collect::<Vec<_>>() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| ModelError::CorruptFile("tensor name not utf-8".into()))?;
        if name != model.params.name(id) {
            return Err(ModelError::CorruptFile(format!("expected tensor {}, found {name}", model.params.name(id))));
        }
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = r.u32()? as usize;
        }
        let t = model.params.get_mut(id);
        if shape != t.shape {
            return Err(ModelError::CorruptFile(format!("tensor {name} has shape {shape:?}, expected {:?}", t.shape)));
        }
        let raw = r.take(t.len() * 4)?;
        for (v, chunk) in t.data.iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
    }
    if r.pos != body.len() {
        return Err(ModelError::CorruptFile("trailing bytes after tensors".into()));
    }
    Ok(model)
}
