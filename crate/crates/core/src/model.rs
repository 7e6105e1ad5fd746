//! The assembled two-stage model and batch construction.

use candle_core::{DType, Device, Tensor};

use crate::config::TrainConfig;
use crate::data::GroundingSample;
use crate::encoder::{mask_tensor, Encoder, TokenProjection};
use crate::error::{Error, Result};
use crate::geometry::{BBox, BinaryMask};
use crate::mim::{boxes_from_tensor, Mim, MimOptions};
use crate::nn::{resample, ParamStore};
use crate::rci::{FineBoxHead, FinePixelDecoder, SimFpn, UnetDecoder};
use crate::rsp::{BoxHead, PixelDecoder, QueryDecoder};
use crate::text::{tokenize_text, Vocabulary};

/// Model inputs plus (optional) ground truth for a batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `B x 3 x H x W`
    pub images: Tensor,
    /// `B x N_t` (u32)
    pub text_ids: Tensor,
    /// `B x N_t`
    pub text_mask: Tensor,
    /// `B x 4` cxcywh
    pub gold_boxes: Tensor,
    /// `B x H x W` in `{0, 1}`
    pub gold_masks: Tensor,
    pub gold_box_list: Vec<BBox>,
    pub gold_mask_list: Vec<BinaryMask>,
}

impl Batch {
    pub fn from_samples(samples: &[&GroundingSample], vocab: &Vocabulary, max_len: usize, dtype: DType) -> Result<Self> {
        let dev = Device::Cpu;
        let Some(first) = samples.first() else {
            return Err(Error::EmptyEvaluation);
        };
        let (h, w) = (first.image.height(), first.image.width());
        let b = samples.len();
        let mut pixels = Vec::with_capacity(b * 3 * h * w);
        let mut ids = Vec::with_capacity(b * max_len);
        let mut masks = Vec::with_capacity(b);
        let mut boxes = Vec::with_capacity(b * 4);
        let mut gold = Vec::with_capacity(b * h * w);
        for s in samples {
            if (s.image.height(), s.image.width()) != (h, w) || s.gold_mask.dims() != (h, w) {
                return Err(Error::BadImageShape {
                    height: s.image.height(),
                    width: s.image.width(),
                    reason: format!("batch images must all be {h}x{w}"),
                });
            }
            pixels.extend_from_slice(s.image.as_slice());
            let tok = tokenize_text(&s.expression, vocab, max_len)?;
            ids.extend_from_slice(&tok.ids);
            masks.push(tok.mask);
            boxes.extend(s.gold_box.to_array().map(|v| v as f32));
            gold.extend(s.gold_mask.to_f32());
        }
        Ok(Self {
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            images: Tensor::from_vec(pixels, (b, 3, h, w), &dev)?.to_dtype(dtype)?,
            text_ids: Tensor::from_vec(ids, (b, max_len), &dev)?,
            text_mask: mask_tensor(&masks, dtype, &dev)?,
            gold_boxes: Tensor::from_vec(boxes, (b, 4), &dev)?.to_dtype(dtype)?,
            gold_masks: Tensor::from_vec(gold, (b, h, w), &dev)?.to_dtype(dtype)?,
            gold_box_list: samples.iter().map(|s| s.gold_box).collect(),
            gold_mask_list: samples.iter().map(|s| s.gold_mask.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Box and mask prediction of one stage.
#[derive(Debug, Clone)]
pub struct StageOutput {
    /// `B x 4` cxcywh in `[0, 1]`.
    pub boxes: Tensor,
    /// `B x H x W` at image resolution.
    pub mask_logits: Tensor,
    /// `B x h x w` at the head's native resolution.
    pub grid_logits: Tensor,
}

/// Intermediate maps exposed for inspection.
#[derive(Debug, Clone)]
pub struct Intermediates {
    /// `B x h x w` box prior.
    pub box_weight: Tensor,
    /// `B x h x w` mask prior.
    pub mask_weight: Tensor,
    /// Spatial dims of the pyramid levels, finest first.
    pub pyramid_dims: Vec<(usize, usize)>,
    /// Patch grid `(h, w)`.
    pub grid: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub coarse: StageOutput,
    pub fine: StageOutput,
    pub intermediates: Intermediates,
}

impl PipelineOutput {
    pub fn stage(&self, fine: bool) -> &StageOutput {
        if fine {
            &self.fine
        } else {
            &self.coarse
        }
    }
}

/// Encoder, coarse stage, interaction module and fine stage. Parameters live in the
/// [`ParamStore`] the model was built from; names starting with `encoder.` form the
/// encoder optimizer group.
#[derive(Debug, Clone)]
pub struct C3vg {
    image_size: usize,
    pub encoder: Encoder,
    pub projection: TokenProjection,
    pub query_decoder: QueryDecoder,
    pub coarse_box: BoxHead,
    pub coarse_pixel: PixelDecoder,
    pub mim: Mim,
    pub simfpn: SimFpn,
    pub unet: UnetDecoder,
    pub fine_pixel: FinePixelDecoder,
    pub fine_box: FineBoxHead,
}

pub fn mim_options(cfg: &TrainConfig) -> MimOptions {
    MimOptions {
        w_1: cfg.weights.w_1,
        invert_box_weight: cfg.flags.invert_box_weight,
        seg_self_attention: cfg.model.seg_self_attention,
    }
}

impl C3vg {
    /// Builds the model. `cfg.model.encoder.vocab_size` must already be resolved.
    pub fn new(store: &mut ParamStore, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let m = &cfg.model;
        let e = &m.encoder;
        let d = e.projection_width;
        let g = cfg.image_size / e.patch_size;
        let mut root = store.root();
        let encoder = Encoder::new(&mut root.pp("encoder"), e, cfg.image_size)?;
        let projection = TokenProjection::new(&mut root.pp("projection"), e.encoder_width, d)?;
        let mut rsp = root.pp("rsp");
        let query_decoder = QueryDecoder::new(&mut rsp.pp("query_decoder"), d, m.head_heads, e.max_text_len, g * g)?;
        let coarse_box = BoxHead::new(&mut rsp.pp("box_head"), d, m.head_hidden)?;
        let coarse_pixel = PixelDecoder::new(&mut rsp.pp("pixel_decoder"), d)?;
        let mim = Mim::new(&mut root.pp("mim"), d, m.head_hidden, m.head_heads, m.roi_pool, mim_options(cfg))?;
        let mut rci = root.pp("rci");
        let simfpn = SimFpn::new(&mut rci.pp("simfpn"), d)?;
        let unet = UnetDecoder::new(&mut rci.pp("unet"), d)?;
        let fine_pixel = FinePixelDecoder::new(&mut rci.pp("pixel_decoder"), d)?;
        let fine_box = FineBoxHead::new(&mut rci.pp("box_head"), d, m.head_hidden)?;
        Ok(Self {
            image_size: cfg.image_size,
            encoder,
            projection,
            query_decoder,
            coarse_box,
            coarse_pixel,
            mim,
            simfpn,
            unet,
            fine_pixel,
            fine_box,
        })
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn set_mim_options(&mut self, opts: MimOptions) {
        self.mim.set_options(opts);
    }

    /// Full two-stage forward pass. `train` selects batch statistics in normalization layers.
    pub fn forward(&self, images: &Tensor, text_ids: &Tensor, text_mask: &Tensor, train: bool) -> Result<PipelineOutput> {
        let (_, _, img_h, img_w) = images.dims4()?;
        let (gh, gw) = self.encoder.grid();
        let bundle = self.encoder.forward(images, text_ids, text_mask)?;
        let tokens = self.projection.forward(&bundle)?;
        let text_bias = tokens.text_bias()?;

        // Coarse stage.
        let object = self.query_decoder.forward(&tokens)?;
        let coarse_boxes = self.coarse_box.forward(&object)?;
        let coarse_grid = self
            .coarse_pixel
            .forward(&tokens.image, &tokens.text, &tokens.text_mask, gh, gw)?;
        let coarse_full = resample::resize_bilinear(&coarse_grid, img_h, img_w)?;

        // Interaction on detached coarse predictions.
        let host_boxes = boxes_from_tensor(&coarse_boxes)?;
        let mim = self.mim.forward(
            &tokens.image,
            &tokens.text,
            &text_bias,
            &host_boxes,
            &coarse_grid.detach(),
            gh,
            gw,
        )?;

        // Fine stage.
        let pyramid = self.simfpn.forward(&mim.f_seg, train)?;
        let fused = self.unet.forward(&pyramid, train)?;
        let (fine_grid, fine_full) = self
            .fine_pixel
            .forward(&fused, &tokens.text, &tokens.text_mask, img_h, img_w)?;
        let fine_boxes = self.fine_box.forward(&mim.f_box)?;

        Ok(PipelineOutput {
            coarse: StageOutput {
                boxes: coarse_boxes,
                mask_logits: coarse_full,
                grid_logits: coarse_grid,
            },
            fine: StageOutput {
                boxes: fine_boxes,
                mask_logits: fine_full,
                grid_logits: fine_grid,
            },
            intermediates: Intermediates {
                box_weight: mim.box_weight,
                mask_weight: mim.mask_weight,
                pyramid_dims: pyramid.spatial_dims()?,
                grid: (gh, gw),
            },
        })
    }

    pub fn forward_pipeline(&self, batch: &Batch, train: bool) -> Result<PipelineOutput> {
        self.forward(&batch.images, &batch.text_ids, &batch.text_mask, train)
    }
}

/// Host-side prediction for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct StagePrediction {
    pub boxes: Vec<BBox>,
    pub masks: Vec<BinaryMask>,
}

impl StagePrediction {
    /// Boxes and masks thresholded at `sigmoid(logit) > t`.
    pub fn from_output(out: &StageOutput, t: f64) -> Result<Self> {
        let boxes = boxes_from_tensor(&out.boxes)?;
        let (b, h, w) = out.mask_logits.dims3()?;
        let logit_t = (t / (1.0 - t)).ln();
        let flat: Vec<f64> = out
            .mask_logits
            .detach()
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1()?;
        let masks = (0..b)
            .map(|i| BinaryMask::from_vec(h, w, flat[i * h * w..(i + 1) * h * w].iter().map(|&v| v > logit_t).collect()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { boxes, masks })
    }
}
