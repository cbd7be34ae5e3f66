//! The tiny encoder-decoder model family: a plain regressor (student/exam),
//! a multi-task teacher with regression and ordinal-classification branches,
//! and the exponential-moving-average update between student and exam.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

/// EMA decay; the exam accumulates `alpha * exam + (1 - alpha) * student`.
#[derive(Debug, Clone, Copy)]
pub struct EmaSchedule {
    pub alpha: f64,
}

#[derive(Debug, Clone)]
pub struct Conv3 {
    pub weight: Tensor, // [Co, Ci, 3, 3]
    pub bias: Tensor,   // [Co, 1, 1]
}

impl Conv3 {
    fn new(ci: usize, co: usize, rng: &mut impl Rng) -> Self {
        Conv3 {
            weight: Tensor::he_uniform(&[co, ci, 3, 3], ci * 9, rng).with_requires_grad(),
            bias: Tensor::zeros(&[co, 1, 1]).with_requires_grad(),
        }
    }

    fn bind(&self, tape: &mut Tape, frozen: bool) -> BoundConv {
        BoundConv {
            w: bind_param(tape, &self.weight, frozen),
            b: bind_param(tape, &self.bias, frozen),
        }
    }

    fn forward(&self, tape: &mut Tape, bound: &BoundConv, x: ValueId) -> Result<ValueId> {
        let c = tape.conv2d_3x3(x, bound.w)?;
        tape.add(c, bound.b)
    }
}

#[derive(Debug, Clone)]
pub struct Conv1 {
    pub weight: Tensor, // [Co, Ci]
    pub bias: Tensor,   // [Co, 1, 1]
}

impl Conv1 {
    fn new(ci: usize, co: usize, rng: &mut impl Rng) -> Self {
        Conv1 {
            weight: Tensor::he_uniform(&[co, ci], ci, rng).with_requires_grad(),
            bias: Tensor::zeros(&[co, 1, 1]).with_requires_grad(),
        }
    }

    fn bind(&self, tape: &mut Tape, frozen: bool) -> BoundConv {
        BoundConv {
            w: bind_param(tape, &self.weight, frozen),
            b: bind_param(tape, &self.bias, frozen),
        }
    }

    fn forward(&self, tape: &mut Tape, bound: &BoundConv, x: ValueId) -> Result<ValueId> {
        let c = tape.conv2d_1x1(x, bound.w)?;
        tape.add(c, bound.b)
    }
}

fn bind_param(tape: &mut Tape, t: &Tensor, frozen: bool) -> ValueId {
    if frozen {
        let mut copy = t.clone();
        copy.set_requires_grad(false);
        tape.leaf(&copy)
    } else {
        tape.leaf(t)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundConv {
    w: ValueId,
    b: ValueId,
}

impl BoundConv {
    pub fn from_ids(w: ValueId, b: ValueId) -> Self {
        BoundConv { w, b }
    }
}

/// Shared encoder-decoder trunk: two conv+relu+avgpool stages, a bottleneck
/// conv, and two upsample+conv+relu stages with skip concatenation.
#[derive(Debug, Clone)]
pub struct Trunk {
    enc1: Conv3,
    enc2: Conv3,
    bottleneck: Conv3,
    dec2: Conv3,
    dec1: Conv3,
}

pub struct BoundTrunk {
    enc1: BoundConv,
    enc2: BoundConv,
    bottleneck: BoundConv,
    dec2: BoundConv,
    dec1: BoundConv,
}

impl Trunk {
    fn new(in_channels: usize, widths: [usize; 3], rng: &mut impl Rng) -> Self {
        let [c1, c2, c3] = widths;
        Trunk {
            enc1: Conv3::new(in_channels, c1, rng),
            enc2: Conv3::new(c1, c2, rng),
            bottleneck: Conv3::new(c2, c3, rng),
            dec2: Conv3::new(c3 + c2, c2, rng),
            dec1: Conv3::new(c2 + c1, c1, rng),
        }
    }

    fn bind(&self, tape: &mut Tape, frozen: bool) -> BoundTrunk {
        BoundTrunk {
            enc1: self.enc1.bind(tape, frozen),
            enc2: self.enc2.bind(tape, frozen),
            bottleneck: self.bottleneck.bind(tape, frozen),
            dec2: self.dec2.bind(tape, frozen),
            dec1: self.dec1.bind(tape, frozen),
        }
    }

    /// Decoder feature map at input resolution, `[N, c1, H, W]`.
    fn forward(&self, tape: &mut Tape, bound: &BoundTrunk, image: ValueId) -> Result<ValueId> {
        let shape = tape.shape(image).to_vec();
        if shape.len() != 4 || shape[2] % 4 != 0 || shape[3] % 4 != 0 {
            return Err(Error::shape(format!(
                "trunk: spatial dims must divide by 4, got {:?}",
                shape
            )));
        }
        let c = self.enc1.forward(tape, &bound.enc1, image)?;
        let e1 = tape.relu(c)?;
        let p1 = tape.avgpool2x(e1)?;
        let c = self.enc2.forward(tape, &bound.enc2, p1)?;
        let e2 = tape.relu(c)?;
        let p2 = tape.avgpool2x(e2)?;
        let c = self.bottleneck.forward(tape, &bound.bottleneck, p2)?;
        let b = tape.relu(c)?;
        let u2 = tape.upsample2x_nearest(b)?;
        let cat2 = tape.concat(1, &[u2, e2])?;
        let c = self.dec2.forward(tape, &bound.dec2, cat2)?;
        let d2 = tape.relu(c)?;
        let u1 = tape.upsample2x_nearest(d2)?;
        let cat1 = tape.concat(1, &[u1, e1])?;
        let c = self.dec1.forward(tape, &bound.dec1, cat1)?;
        tape.relu(c)
    }

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("enc1.weight".into(), &self.enc1.weight),
            ("enc1.bias".into(), &self.enc1.bias),
            ("enc2.weight".into(), &self.enc2.weight),
            ("enc2.bias".into(), &self.enc2.bias),
            ("bottleneck.weight".into(), &self.bottleneck.weight),
            ("bottleneck.bias".into(), &self.bottleneck.bias),
            ("dec2.weight".into(), &self.dec2.weight),
            ("dec2.bias".into(), &self.dec2.bias),
            ("dec1.weight".into(), &self.dec1.weight),
            ("dec1.bias".into(), &self.dec1.bias),
        ]
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("enc1.weight".into(), &mut self.enc1.weight),
            ("enc1.bias".into(), &mut self.enc1.bias),
            ("enc2.weight".into(), &mut self.enc2.weight),
            ("enc2.bias".into(), &mut self.enc2.bias),
            ("bottleneck.weight".into(), &mut self.bottleneck.weight),
            ("bottleneck.bias".into(), &mut self.bottleneck.bias),
            ("dec2.weight".into(), &mut self.dec2.weight),
            ("dec2.bias".into(), &mut self.dec2.bias),
            ("dec1.weight".into(), &mut self.dec1.weight),
            ("dec1.bias".into(), &mut self.dec1.bias),
        ]
    }

    fn bound_params(bound: &BoundTrunk) -> Vec<ValueId> {
        vec![
            bound.enc1.w,
            bound.enc1.b,
            bound.enc2.w,
            bound.enc2.b,
            bound.bottleneck.w,
            bound.bottleneck.b,
            bound.dec2.w,
            bound.dec2.b,
            bound.dec1.w,
            bound.dec1.b,
        ]
    }

    /// Rebuilds a binding from leaf ids laid out in `named_params` order.
    fn from_ids(ids: &[ValueId]) -> BoundTrunk {
        BoundTrunk {
            enc1: BoundConv::from_ids(ids[0], ids[1]),
            enc2: BoundConv::from_ids(ids[2], ids[3]),
            bottleneck: BoundConv::from_ids(ids[4], ids[5]),
            dec2: BoundConv::from_ids(ids[6], ids[7]),
            dec1: BoundConv::from_ids(ids[8], ids[9]),
        }
    }
}

/// Plain height regressor: trunk plus a 1-channel linear output head.
#[derive(Debug, Clone)]
pub struct RegressorNet {
    trunk: Trunk,
    head: Conv1,
}

pub struct BoundRegressor {
    trunk: BoundTrunk,
    head: BoundConv,
}

impl RegressorNet {
    pub fn new(in_channels: usize, widths: [usize; 3], rng: &mut impl Rng) -> Self {
        RegressorNet {
            trunk: Trunk::new(in_channels, widths, rng),
            head: Conv1::new(widths[0], 1, rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape, frozen: bool) -> BoundRegressor {
        BoundRegressor {
            trunk: self.trunk.bind(tape, frozen),
            head: self.head.bind(tape, frozen),
        }
    }

    /// Height map `[N, 1, H, W]`, no output activation.
    pub fn forward(&self, tape: &mut Tape, bound: &BoundRegressor, image: ValueId) -> Result<ValueId> {
        let f = self.trunk.forward(tape, &bound.trunk, image)?;
        self.head.forward(tape, &bound.head, f)
    }

    /// Inference on plain values; nothing joins any caller's tape.
    pub fn predict(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, true);
        let img = tape.leaf(image);
        let out = self.forward(&mut tape, &bound, img)?;
        Tensor::from_vec(tape.shape(out), tape.value(out).to_vec())
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.trunk.named_params();
        v.push(("head.weight".into(), &self.head.weight));
        v.push(("head.bias".into(), &self.head.bias));
        v
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = self.trunk.named_params_mut();
        v.push(("head.weight".into(), &mut self.head.weight));
        v.push(("head.bias".into(), &mut self.head.bias));
        v
    }

    pub fn bound_params(bound: &BoundRegressor) -> Vec<ValueId> {
        let mut v = Trunk::bound_params(&bound.trunk);
        v.push(bound.head.w);
        v.push(bound.head.b);
        v
    }

    /// Rebuilds a binding from leaf ids laid out in `named_params` order
    /// (12 ids).
    pub fn binding_from_ids(ids: &[ValueId]) -> BoundRegressor {
        BoundRegressor {
            trunk: Trunk::from_ids(&ids[..10]),
            head: BoundConv::from_ids(ids[10], ids[11]),
        }
    }

    /// Pulls tape gradients into the parameter tensors.
    pub fn take_grads(&mut self, tape: &Tape, bound: &BoundRegressor) -> Result<()> {
        let ids = Self::bound_params(bound);
        for ((_, p), id) in self.named_params_mut().into_iter().zip(ids) {
            tape.grad_into(id, p)?;
        }
        Ok(())
    }
}

/// Multi-task teacher: the regressor trunk-and-head plus a linear feature
/// transform and a per-cut sigmoid classification head sharing the decoder
/// features.
#[derive(Debug, Clone)]
pub struct MultiTaskNet {
    pub reg: RegressorNet,
    cls_feat: Conv1,
    cls_head: Conv1,
}

pub struct BoundMultiTask {
    reg: BoundRegressor,
    cls_feat: BoundConv,
    cls_head: BoundConv,
}

impl MultiTaskNet {
    pub fn new(in_channels: usize, widths: [usize; 3], num_cuts: usize, rng: &mut impl Rng) -> Self {
        MultiTaskNet {
            reg: RegressorNet::new(in_channels, widths, rng),
            cls_feat: Conv1::new(widths[0], widths[0], rng),
            cls_head: Conv1::new(widths[0], num_cuts, rng),
        }
    }

    pub fn num_cuts(&self) -> usize {
        self.cls_head.weight.shape()[0]
    }

    pub fn bind(&self, tape: &mut Tape, frozen: bool) -> BoundMultiTask {
        BoundMultiTask {
            reg: self.reg.bind(tape, frozen),
            cls_feat: self.cls_feat.bind(tape, frozen),
            cls_head: self.cls_head.bind(tape, frozen),
        }
    }

    /// Height map `[N,1,H,W]` and per-cut probability maps `[N,N-1,H,W]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundMultiTask,
        image: ValueId,
    ) -> Result<(ValueId, ValueId)> {
        let f = self.reg.trunk.forward(tape, &bound.reg.trunk, image)?;
        let heights = self.reg.head.forward(tape, &bound.reg.head, f)?;
        let cf = self.cls_feat.forward(tape, &bound.cls_feat, f)?;
        let logits = self.cls_head.forward(tape, &bound.cls_head, cf)?;
        let probs = tape.sigmoid(logits)?;
        Ok((heights, probs))
    }

    pub fn predict(&self, image: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, true);
        let img = tape.leaf(image);
        let (h, p) = self.forward(&mut tape, &bound, img)?;
        Ok((
            Tensor::from_vec(tape.shape(h), tape.value(h).to_vec())?,
            Tensor::from_vec(tape.shape(p), tape.value(p).to_vec())?,
        ))
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.reg.named_params();
        v.push(("cls_feat.weight".into(), &self.cls_feat.weight));
        v.push(("cls_feat.bias".into(), &self.cls_feat.bias));
        v.push(("cls_head.weight".into(), &self.cls_head.weight));
        v.push(("cls_head.bias".into(), &self.cls_head.bias));
        v
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = self.reg.named_params_mut();
        v.push(("cls_feat.weight".into(), &mut self.cls_feat.weight));
        v.push(("cls_feat.bias".into(), &mut self.cls_feat.bias));
        v.push(("cls_head.weight".into(), &mut self.cls_head.weight));
        v.push(("cls_head.bias".into(), &mut self.cls_head.bias));
        v
    }

    pub fn bound_params(bound: &BoundMultiTask) -> Vec<ValueId> {
        let mut v = RegressorNet::bound_params(&bound.reg);
        v.push(bound.cls_feat.w);
        v.push(bound.cls_feat.b);
        v.push(bound.cls_head.w);
        v.push(bound.cls_head.b);
        v
    }

    /// Rebuilds a binding from leaf ids laid out in `named_params` order
    /// (16 ids).
    pub fn binding_from_ids(ids: &[ValueId]) -> BoundMultiTask {
        BoundMultiTask {
            reg: RegressorNet::binding_from_ids(&ids[..12]),
            cls_feat: BoundConv::from_ids(ids[12], ids[13]),
            cls_head: BoundConv::from_ids(ids[14], ids[15]),
        }
    }

    pub fn take_grads(&mut self, tape: &Tape, bound: &BoundMultiTask) -> Result<()> {
        let ids = Self::bound_params(bound);
        for ((_, p), id) in self.named_params_mut().into_iter().zip(ids) {
            tape.grad_into(id, p)?;
        }
        Ok(())
    }

    /// Zeroes both output heads, for tests of the initial-state contracts.
    pub fn zero_heads(&mut self) {
        for t in [
            &mut self.reg.head.weight,
            &mut self.reg.head.bias,
            &mut self.cls_head.weight,
            &mut self.cls_head.bias,
        ] {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Classification-only net: trunk plus the linear feature transform and
/// per-cut sigmoid head, no regression output.
#[derive(Debug, Clone)]
pub struct ClassifierNet {
    trunk: Trunk,
    cls_feat: Conv1,
    cls_head: Conv1,
}

pub struct BoundClassifier {
    trunk: BoundTrunk,
    cls_feat: BoundConv,
    cls_head: BoundConv,
}

impl ClassifierNet {
    pub fn new(in_channels: usize, widths: [usize; 3], num_cuts: usize, rng: &mut impl Rng) -> Self {
        ClassifierNet {
            trunk: Trunk::new(in_channels, widths, rng),
            cls_feat: Conv1::new(widths[0], widths[0], rng),
            cls_head: Conv1::new(widths[0], num_cuts, rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape, frozen: bool) -> BoundClassifier {
        BoundClassifier {
            trunk: self.trunk.bind(tape, frozen),
            cls_feat: self.cls_feat.bind(tape, frozen),
            cls_head: self.cls_head.bind(tape, frozen),
        }
    }

    /// Per-cut probability maps `[N, N-1, H, W]`.
    pub fn forward(&self, tape: &mut Tape, bound: &BoundClassifier, image: ValueId) -> Result<ValueId> {
        let f = self.trunk.forward(tape, &bound.trunk, image)?;
        let cf = self.cls_feat.forward(tape, &bound.cls_feat, f)?;
        let logits = self.cls_head.forward(tape, &bound.cls_head, cf)?;
        tape.sigmoid(logits)
    }

    pub fn predict(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, true);
        let img = tape.leaf(image);
        let p = self.forward(&mut tape, &bound, img)?;
        Tensor::from_vec(tape.shape(p), tape.value(p).to_vec())
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.trunk.named_params();
        v.push(("cls_feat.weight".into(), &self.cls_feat.weight));
        v.push(("cls_feat.bias".into(), &self.cls_feat.bias));
        v.push(("cls_head.weight".into(), &self.cls_head.weight));
        v.push(("cls_head.bias".into(), &self.cls_head.bias));
        v
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = self.trunk.named_params_mut();
        v.push(("cls_feat.weight".into(), &mut self.cls_feat.weight));
        v.push(("cls_feat.bias".into(), &mut self.cls_feat.bias));
        v.push(("cls_head.weight".into(), &mut self.cls_head.weight));
        v.push(("cls_head.bias".into(), &mut self.cls_head.bias));
        v
    }

    pub fn bound_params(bound: &BoundClassifier) -> Vec<ValueId> {
        let mut v = Trunk::bound_params(&bound.trunk);
        v.push(bound.cls_feat.w);
        v.push(bound.cls_feat.b);
        v.push(bound.cls_head.w);
        v.push(bound.cls_head.b);
        v
    }

    pub fn take_grads(&mut self, tape: &Tape, bound: &BoundClassifier) -> Result<()> {
        let ids = Self::bound_params(bound);
        for ((_, p), id) in self.named_params_mut().into_iter().zip(ids) {
            tape.grad_into(id, p)?;
        }
        Ok(())
    }
}

/// `exam <- alpha * exam + (1 - alpha) * student`, outside any tape.
pub fn ema_update(exam: &mut RegressorNet, student: &RegressorNet, schedule: EmaSchedule) -> Result<()> {
    let student_params = student.named_params();
    let mut exam_params = exam.named_params_mut();
    if student_params.len() != exam_params.len() {
        return Err(Error::shape("ema: parameter lists differ in length".to_string()));
    }
    for ((name_e, e), (name_s, s)) in exam_params.iter_mut().zip(&student_params) {
        if e.shape() != s.shape() || name_e != name_s {
            return Err(Error::shape(format!(
                "ema: parameter mismatch {name_e} {:?} vs {name_s} {:?}",
                e.shape(),
                s.shape()
            )));
        }
        let a = schedule.alpha;
        for (ev, sv) in e.data_mut().iter_mut().zip(s.data()) {
            *ev = a * *ev + (1.0 - a) * sv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bins::class_probs_unchecked;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn image(n: usize, c: usize, s: usize, seed: u64) -> Tensor {
        Tensor::he_uniform(&[n, c, s, s], 4, &mut rng(seed))
    }

    #[test]
    fn zero_head_outputs_zero_everywhere() {
        let mut net = RegressorNet::new(3, [4, 6, 8], &mut rng(1));
        net.head.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        net.head.bias.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let out = net.predict(&image(1, 3, 8, 2)).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn forward_is_deterministic_per_seed() {
        let build = || RegressorNet::new(3, [4, 6, 8], &mut rng(33));
        let a = build().predict(&image(1, 3, 8, 5)).unwrap();
        let b = build().predict(&image(1, 3, 8, 5)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn rejects_indivisible_spatial_dims() {
        let net = RegressorNet::new(3, [4, 6, 8], &mut rng(1));
        let img = Tensor::zeros(&[1, 3, 6, 6]);
        assert!(net.predict(&img).is_err());
    }

    #[test]
    fn regressor_gradients_match_finite_differences() {
        let net = RegressorNet::new(2, [2, 3, 4], &mut rng(7));
        let img = image(1, 2, 8, 8);
        let params: Vec<Tensor> = net.named_params().iter().map(|(_, t)| (*t).clone()).collect();

        // treat parameters as the differentiated inputs; the image is fixed
        let err = crate::gradcheck::max_relative_error(&params, 1e-5, |tape, ids| {
            let bound = RegressorNet::binding_from_ids(ids);
            let img_id = tape.leaf(&img);
            let out = net.forward(tape, &bound, img_id)?;
            tape.mean(out)
        })
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn teacher_zero_heads_give_zero_heights_and_half_probs() {
        let mut net = MultiTaskNet::new(3, [4, 6, 8], 7, &mut rng(9));
        net.zero_heads();
        let (h, p) = net.predict(&image(2, 3, 8, 10)).unwrap();
        assert_eq!(h.shape(), &[2, 1, 8, 8]);
        assert_eq!(p.shape(), &[2, 7, 8, 8]);
        assert!(h.data().iter().all(|v| *v == 0.0));
        assert!(p.data().iter().all(|v| *v == 0.5));

        // telescoping probabilities of the all-0.5 cut maps are (1/2)^(i+1)
        let q = class_probs_unchecked(&vec![0.5; 7]);
        for (i, qi) in q.iter().enumerate().take(7) {
            assert!((qi - 0.5f64.powi(i as i32 + 1)).abs() < 1e-15);
        }
        assert!((q[7] - 0.5f64.powi(7)).abs() < 1e-15);
    }

    #[test]
    fn ema_degenerate_and_midpoint_cases() {
        let student = RegressorNet::new(3, [2, 3, 4], &mut rng(11));
        let mut exam = RegressorNet::new(3, [2, 3, 4], &mut rng(12));

        let mut exam_a0 = exam.clone();
        ema_update(&mut exam_a0, &student, EmaSchedule { alpha: 0.0 }).unwrap();
        for ((_, e), (_, s)) in exam_a0.named_params().iter().zip(student.named_params().iter()) {
            assert_eq!(e.data(), s.data());
        }

        let before: Vec<Vec<f64>> = exam.named_params().iter().map(|(_, t)| t.data().to_vec()).collect();
        let mut exam_a1 = exam.clone();
        ema_update(&mut exam_a1, &student, EmaSchedule { alpha: 1.0 }).unwrap();
        for ((_, e), b) in exam_a1.named_params().iter().zip(&before) {
            assert_eq!(e.data(), b.as_slice());
        }

        // plain arithmetic midpoint
        for (_, p) in exam.named_params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut target = student.clone();
        for (_, p) in target.named_params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 2.0);
        }
        ema_update(&mut exam, &target, EmaSchedule { alpha: 0.5 }).unwrap();
        for (_, e) in exam.named_params() {
            assert!(e.data().iter().all(|v| *v == 1.0));
        }
    }

    #[test]
    fn ema_closed_form_after_k_steps() {
        let mut exam = RegressorNet::new(3, [2, 3, 4], &mut rng(13));
        let student = RegressorNet::new(3, [2, 3, 4], &mut rng(14));
        let theta0: Vec<Vec<f64>> = exam.named_params().iter().map(|(_, t)| t.data().to_vec()).collect();
        let alpha = 0.9;
        let k = 17;
        for _ in 0..k {
            ema_update(&mut exam, &student, EmaSchedule { alpha }).unwrap();
        }
        let decay = alpha.powi(k);
        for (((_, e), (_, s)), t0) in exam
            .named_params()
            .iter()
            .zip(student.named_params().iter())
            .zip(&theta0)
        {
            for ((ev, sv), t0v) in e.data().iter().zip(s.data()).zip(t0) {
                let want = decay * t0v + (1.0 - decay) * sv;
                assert!((ev - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ema_rejects_shape_mismatch() {
        let student = RegressorNet::new(3, [2, 3, 4], &mut rng(15));
        let mut exam = RegressorNet::new(3, [2, 3, 5], &mut rng(16));
        assert!(ema_update(&mut exam, &student, EmaSchedule { alpha: 0.5 }).is_err());
    }

    #[test]
    fn student_and_exam_share_parameter_shapes() {
        let student = RegressorNet::new(3, [16, 32, 64], &mut rng(17));
        let exam = student.clone();
        for ((ns, s), (ne, e)) in student.named_params().iter().zip(exam.named_params().iter()) {
            assert_eq!(ns, ne);
            assert_eq!(s.shape(), e.shape());
        }
    }
}
