//! Finite-difference gradient checks over every differentiable building
//! block, from single primitives up to the joint loss of a full model.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Result;
use crate::model::{
    randomize, MambaBlock, MambaConfig, MambaDecoderBlock, MambaEncoderBlock, ModelConfig, SpeechMambaModel,
};
use crate::nn::{
    causal_depthwise_conv1d, conv2d, embedding_lookup, grad_check, layer_norm, rms_norm, AttentionConfig,
    AttentionMask, Ctx, GradCheckReport, Init, Module, MultiHeadAttention,
};
use crate::objectives::{ctc_loss, s2s_loss};
use crate::ssm::{selective_scan, ScanMode, SelectiveSsm, SsmConfig};
use crate::tensor::Tensor;
use crate::train::{loss_terms, Batch, ObjectiveConfig};

/// Relative-error bound for single primitives.
pub const PRIMITIVE_TOL: f64 = 1e-6;
/// Relative-error bound for blocks and whole models.
pub const COMPOSITE_TOL: f64 = 1e-4;
pub const FD_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CaseKind {
    Primitive,
    Composite,
}

#[derive(Clone, Debug)]
pub struct GradCase {
    pub name: String,
    pub kind: CaseKind,
    pub report: GradCheckReport,
}

impl GradCase {
    pub fn tolerance(&self) -> f64 {
        match self.kind {
            CaseKind::Primitive => PRIMITIVE_TOL,
            CaseKind::Composite => COMPOSITE_TOL,
        }
    }

    pub fn passed(&self) -> bool {
        self.report.max_rel_err < self.tolerance()
    }
}

/// Weighted sum with fixed pseudo-random weights, so every output
/// coordinate contributes a distinct gradient.
fn probe(y: &Tensor, seed: u64) -> Result<Tensor> {
    let w = Init::new(seed).uniform(y.shape(), 1.0).detach();
    Ok(y.mul(&w)?.sum_all())
}

struct Suite {
    cases: Vec<GradCase>,
}

impl Suite {
    fn run<F>(&mut self, name: &str, kind: CaseKind, params: &[Tensor], f: F) -> Result<()>
    where
        F: Fn() -> Result<Tensor>,
    {
        let report = grad_check(f, params, FD_EPS)?;
        self.cases.push(GradCase {
            name: String::from(name),
            kind,
            report,
        });
        Ok(())
    }
}

fn tiny_mamba(d: usize, di: usize, n: usize, mode: ScanMode) -> MambaConfig {
    MambaConfig {
        d_model: d,
        d_inner: di,
        state_dim: n,
        conv_width: 4,
        dropout_p: 0.0,
        scan_mode: mode,
    }
}

fn params_of(m: &dyn Module) -> Vec<Tensor> {
    m.parameters().into_iter().map(|(_, t)| t).collect()
}

/// Runs every case. Inputs are seeded, so results are reproducible.
pub fn gradient_suite() -> Result<Vec<GradCase>> {
    use CaseKind::{Composite, Primitive};
    let mut s = Suite { cases: Vec::new() };
    let mut init = Init::new(2024);
    let ctx = Ctx::new(0);

    let a = init.uniform(&[2, 3, 4], 1.0);
    let b = init.uniform(&[4, 5], 1.0);
    s.run("matmul", Primitive, &[a.clone(), b.clone()], || Ok(a.matmul(&b)?.sum_all()))?;
    let bb = init.uniform(&[2, 4, 2], 1.0);
    s.run("matmul_batched", Primitive, &[a.clone(), bb.clone()], || probe(&a.matmul(&bb)?, 1))?;

    let x = Tensor::parameter(vec![-2.0, -0.5, 0.0, 0.5, 2.0], &[5]).expect("5 values");
    s.run("silu", Primitive, &[x.clone()], || Ok(x.silu().sum_all()))?;
    s.run("softplus", Primitive, &[x.clone()], || probe(&x.softplus(), 2))?;
    s.run("exp_ln_sigmoid", Primitive, &[x.clone()], || {
        Ok(x.exp().add_scalar(1.0).ln().add(&x.sigmoid())?.sum_all())
    })?;

    let y = init.uniform(&[3, 6], 1.5);
    let gain = init.uniform(&[6], 1.0);
    s.run("rms_norm", Primitive, &[y.clone(), gain.clone()], || probe(&rms_norm(&y, &gain, 1e-8)?, 3))?;
    let lb = init.uniform(&[6], 1.0);
    s.run("layer_norm", Primitive, &[y.clone(), gain.clone(), lb.clone()], || {
        probe(&layer_norm(&y, &gain, &lb, 1e-5)?, 4)
    })?;
    s.run("softmax", Primitive, &[y.clone()], || probe(&y.softmax(1)?, 5))?;
    s.run("log_softmax", Primitive, &[y.clone()], || probe(&y.log_softmax(1)?, 6))?;
    s.run("reductions_and_shapes", Primitive, &[a.clone()], || {
        let h = a.permute(&[2, 0, 1])?.reshape(&[4, 6])?.narrow(1, 1, 4)?;
        probe(&h.sum_axis(0, false)?.add(&h.mean_axis(0, false)?.square())?, 7)
    })?;
    let table = init.uniform(&[5, 3], 1.0);
    s.run("embedding", Primitive, &[table.clone()], || {
        probe(&embedding_lookup(&table, &[1, 4, 1, 0], 2, 2)?, 8)
    })?;

    let cx = init.uniform(&[2, 6, 3], 1.0);
    let ck = init.uniform(&[3, 4], 1.0);
    let cb = init.uniform(&[3], 1.0);
    s.run("causal_depthwise_conv1d", Primitive, &[cx.clone(), ck.clone(), cb.clone()], || {
        probe(&causal_depthwise_conv1d(&cx, &ck, &cb)?, 9)
    })?;
    let ix = init.uniform(&[1, 2, 5, 4], 1.0);
    let iw = init.uniform(&[3, 2, 3, 3], 1.0);
    let ib = init.uniform(&[3], 1.0);
    s.run("conv2d", Primitive, &[ix.clone(), iw.clone(), ib.clone()], || {
        probe(&conv2d(&ix, &iw, &ib, 2, 1)?, 10)
    })?;

    let attn = MultiHeadAttention::new(
        &mut init,
        AttentionConfig {
            model_dim: 4,
            num_heads: 1,
            dropout_p: 0.0,
        },
    )?;
    let q = init.uniform(&[1, 3, 4], 1.0);
    let k = init.uniform(&[1, 3, 4], 1.0);
    let v = init.uniform(&[1, 3, 4], 1.0);
    let causal = AttentionMask::causal(1, 3);
    let mut ap = vec![q.clone(), k.clone(), v.clone()];
    ap.extend(params_of(&attn));
    s.run("multi_head_attention", Primitive, &ap, || {
        probe(&attn.forward(&q, &k, &v, Some(&causal))?, 11)
    })?;

    let ssm = SelectiveSsm::new(&mut init, SsmConfig::new(3, 2))?;
    randomize(&ssm, 12, 0.5);
    let sx = init.uniform(&[1, 4, 3], 1.0);
    let mut sp = vec![sx.clone()];
    sp.extend(params_of(&ssm));
    s.run("selective_projections", Primitive, &sp, || {
        let (d, bm, cm) = ssm.selective_projections(&sx)?;
        probe(&Tensor::concat(&[d, bm, cm], 2)?, 13)
    })?;
    let delta = init.uniform(&[1, 4, 3], 1.0).softplus().detach_with_grad(true);
    let am = ssm.a().detach_with_grad(true);
    let bsel = init.uniform(&[1, 4, 2], 1.0);
    let csel = init.uniform(&[1, 4, 2], 1.0);
    let dk = init.uniform(&[3], 1.0);
    let scan_params = [sx.clone(), delta.clone(), am.clone(), bsel.clone(), csel.clone(), dk.clone()];
    for (name, mode) in [
        ("selective_scan_sequential", ScanMode::Sequential),
        ("selective_scan_parallel", ScanMode::Parallel),
    ] {
        s.run(name, Primitive, &scan_params, || {
            probe(&selective_scan(&sx, &delta, &am, &bsel, &csel, &dk, mode)?, 14)
        })?;
    }
    s.run("selective_ssm_forward", Composite, &sp, || probe(&ssm.forward(&sx, ScanMode::Parallel)?, 15))?;

    let lp_in = init.uniform(&[2, 4, 3], 2.0);
    s.run("ctc_loss", Composite, &[lp_in.clone()], || {
        ctc_loss(&lp_in.log_softmax(2)?, &[vec![1, 2], vec![2]], &[4, 3])
    })?;
    let logits = init.uniform(&[2, 3, 5], 2.0);
    s.run("s2s_loss", Composite, &[logits.clone()], || {
        s2s_loss(&logits, &[3, 4, 2, 1, 2, 0], 0.1, 0)
    })?;

    let mb = MambaBlock::new(&mut init, tiny_mamba(8, 16, 2, ScanMode::Parallel))?;
    randomize(&mb, 16, 0.5);
    let mx = init.uniform(&[1, 3, 8], 1.0);
    let mut mp = vec![mx.clone()];
    mp.extend(params_of(&mb));
    s.run("mamba_block", Composite, &mp, || probe(&mb.forward(&mx, &ctx)?, 17))?;

    let attn_cfg = AttentionConfig {
        model_dim: 8,
        num_heads: 2,
        dropout_p: 0.0,
    };
    let eb = MambaEncoderBlock::new(&mut init, tiny_mamba(8, 16, 2, ScanMode::Parallel), attn_cfg)?;
    randomize(&eb, 18, 0.5);
    let ex = init.uniform(&[2, 4, 8], 1.0);
    let emask = AttentionMask::from_key_lengths(&[4, 3], 4, 4);
    let mut ep = vec![ex.clone()];
    ep.extend(params_of(&eb));
    s.run("encoder_block", Composite, &ep, || probe(&eb.forward(&ex, &emask, &ctx)?, 19))?;

    let db = MambaDecoderBlock::new(&mut init, tiny_mamba(8, 16, 2, ScanMode::Parallel), attn_cfg)?;
    randomize(&db, 20, 0.5);
    let dy = init.uniform(&[2, 3, 8], 1.0);
    let mem = init.uniform(&[2, 4, 8], 1.0);
    let mmask = AttentionMask::from_key_lengths(&[4, 2], 3, 4);
    let mut dp = vec![dy.clone(), mem.clone()];
    dp.extend(params_of(&db));
    s.run("decoder_block", Composite, &dp, || probe(&db.forward(&dy, &mem, &mmask, &ctx)?, 21))?;

    for (name, mamba_encoder, mamba_decoder) in [
        ("speech_mamba_joint_loss", true, true),
        ("transformer_joint_loss", false, false),
    ] {
        let cfg = ModelConfig {
            mamba_encoder,
            mamba_decoder,
            ..ModelConfig::tiny(6)
        };
        let model = SpeechMambaModel::new(cfg, 22)?;
        randomize(&model, 23, 0.5);
        let mut feat_init = Init::new(24);
        let feats = vec![
            feat_init.uniform(&[12, 8], 1.0).to_vec(),
            feat_init.uniform(&[9, 8], 1.0).to_vec(),
        ];
        let batch = Batch::new(vec!["u0".into(), "u1".into()], &feats, 8, vec![vec![3, 4], vec![5]])?;
        let obj = ObjectiveConfig {
            alpha: 0.3,
            label_smoothing: 0.1,
        };
        let params = params_of(&model);
        s.run(name, Composite, &params, || {
            let t = loss_terms(&model, &batch, &obj, &ctx)?;
            let ctc = t.ctc_sum.expect("ctc term").scale(obj.alpha / t.utterances as f64);
            let s2s = t.s2s_sum.expect("s2s term").scale((1.0 - obj.alpha) / t.tokens as f64);
            ctc.add(&s2s)
        })?;
    }
    Ok(s.cases)
}
