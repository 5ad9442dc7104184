#![allow(dead_code)]

use std::sync::Arc;

use codemap::depth_codec::{depth_to_proximity_image, Decoder, DepthCode, LinearDecoder};
use codemap::geometry::ProximityParams;
use codemap::image::DenseImage;
use codemap::optimizer::{build_problem, OptimizerConfig, WindowProblem};
use codemap::pipeline::{evaluate, KeyframePacket};
use codemap::synth::{make_sequence, perturb_code, SceneSpec, SequenceOptions};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const CODE_SIZE: usize = 32;

pub struct Fixture {
    pub packets: Vec<KeyframePacket>,
    pub decoders: Vec<Arc<LinearDecoder>>,
    /// Least-squares codes of the ground-truth depth.
    pub gt_codes: Vec<DepthCode>,
}

pub fn fixture(spec: &SceneSpec, opts: &SequenceOptions) -> Fixture {
    let packets = make_sequence(spec, opts).expect("scene renders");
    let decoder = Decoder::analytic(CODE_SIZE, ProximityParams::default());
    let decoders: Vec<Arc<LinearDecoder>> =
        packets.iter().map(|p| Arc::new(decoder.condition(&p.conditioning()).expect("conditions"))).collect();
    let gt_codes = packets
        .iter()
        .zip(&decoders)
        .map(|(p, d)| {
            let gt = p.gt_depth.as_ref().expect("synthetic gt");
            let prox = depth_to_proximity_image(gt, &d.proximity_params());
            let target: Vec<f64> = prox.data().iter().map(|&v| v as f64).collect();
            let mask: Vec<bool> = gt.data().iter().map(|&v| DenseImage::is_valid_depth(v)).collect();
            d.project_onto_basis(&target, &mask)
        })
        .collect();
    Fixture { packets, decoders, gt_codes }
}

impl Fixture {
    pub fn perturbed(&self, sigma: f64, seed: u64) -> Vec<DepthCode> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.gt_codes
            .iter()
            .map(|c| DepthCode::from_vec(perturb_code(c.as_slice(), sigma, &mut rng)).unwrap())
            .collect()
    }

    pub fn problem(&self, codes: Vec<DepthCode>, config: &OptimizerConfig) -> WindowProblem {
        let window: Vec<&KeyframePacket> = self.packets.iter().collect();
        build_problem(&window, codes, &self.decoders, config).expect("valid window")
    }

    pub fn depths(&self, codes: &[DepthCode]) -> Vec<DenseImage> {
        self.decoders.iter().zip(codes).map(|(d, c)| d.decode(c).unwrap().depth).collect()
    }

    /// Mean over frames of the per-frame depth MAE against ground truth.
    pub fn mae(&self, codes: &[DepthCode]) -> f64 {
        let depths = self.depths(codes);
        let sum: f64 = self
            .packets
            .iter()
            .zip(&depths)
            .map(|(p, d)| evaluate(d, p.gt_depth.as_ref().unwrap()).unwrap().0)
            .sum();
        sum / depths.len() as f64
    }
}

/// Same basis as `d`, but with the exact ground-truth proximity as prior, so
/// the zero code reproduces the rendered depth.
pub fn exact_decoder(d: &LinearDecoder, gt: &DenseImage) -> LinearDecoder {
    let prox = depth_to_proximity_image(gt, &d.proximity_params());
    let n = d.width() * d.height();
    let basis: Vec<f64> = (0..n).flat_map(|i| d.jacobian_row(i).to_vec()).collect();
    LinearDecoder::new(
        d.width(),
        d.height(),
        d.code_size(),
        d.proximity_params(),
        prox.data().iter().map(|&p| p as f64).collect(),
        Arc::new(basis),
        d.uncertainty().to_vec(),
    )
    .unwrap()
}

impl Fixture {
    pub fn with_exact_decoders(mut self) -> Self {
        self.decoders = self
            .packets
            .iter()
            .zip(&self.decoders)
            .map(|(p, d)| Arc::new(exact_decoder(d, p.gt_depth.as_ref().unwrap())))
            .collect();
        self.gt_codes = self.gt_codes.iter().map(|c| DepthCode::zeros(c.len())).collect();
        self
    }
}
