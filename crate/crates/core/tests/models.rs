use mcgate_core::conformer::{ConformerAsr, ConformerBlock, ConformerConfig, InputNorm};
use mcgate_core::mcg::{apply_gates, McgConfig, McgModel};
use mcgate_core::nn::{Ctx, Module};
use mcgate_core::numerics::rng::Rng;
use mcgate_core::{no_grad, Param, Tensor};

fn random(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| rng.normal()).collect(), shape).unwrap()
}

fn small_mcg() -> McgConfig {
    McgConfig {
        n_bins: 16,
        channels: vec![2, 3, 4, 3, 2],
        freq_strides: vec![1, 1, 2, 2, 1],
        lstm_units: 5,
        head_channels: 3,
        epsilons: vec![-1.0, 1.0, 2.0],
    }
}

fn small_conformer() -> ConformerConfig {
    ConformerConfig {
        n_bins: 16,
        num_blocks: 2,
        d_model: 8,
        ffn_units: 16,
        heads: 2,
        conv_kernel: 3,
        subsample_channels: 2,
        vocab_size: 4,
        dropout: 0.1,
        input_norm: InputNorm::BatchNorm,
    }
}

fn zero(params: impl IntoIterator<Item = Param<f64>>) {
    for p in params {
        p.set_data(vec![0.0; p.numel()]);
    }
}

#[test]
fn zeroed_heads_give_half_gates_and_half_spectra() {
    let mut rng = Rng::seed_from_u64(1);
    let mcg = McgModel::<f64>::new(small_mcg(), &mut rng).unwrap();
    for h in &mcg.heads {
        zero([h.weight.clone(), h.bias.clone()]);
    }
    let x = random(&mut rng, &[2, 7, 16]);
    let out = mcg.forward(&x, &Ctx::eval()).unwrap();
    assert_eq!(out.gates.len(), 3);
    for g in &out.gates {
        assert!(g.data().iter().all(|&v| v == 0.5));
    }
    let halves: Vec<Tensor<f64>> = (0..3).map(|_| x.mul_scalar(0.5)).collect();
    let expected = mcg.fuse(&halves, &Ctx::eval()).unwrap();
    assert_eq!(out.x_in.data(), expected.data());
}

#[test]
fn unit_gates_pass_the_spectrum_through() {
    let mut rng = Rng::seed_from_u64(2);
    let mcg = McgModel::<f64>::new(small_mcg(), &mut rng).unwrap();
    let x = random(&mut rng, &[1, 5, 16]);
    let ones = vec![Tensor::from_vec(vec![1.0; 80], &[1, 5, 16]).unwrap(); 3];
    let out = mcg.forward_from_gates(ones, &x, &Ctx::eval()).unwrap();
    for r in &out.filtered {
        assert_eq!(r.data(), x.data());
    }
}

#[test]
fn gating_matches_an_elementwise_oracle() {
    let mut rng = Rng::seed_from_u64(3);
    let x = random(&mut rng, &[2, 4, 6]);
    let zeros = Tensor::from_vec(vec![0.0; 48], &[2, 4, 6]).unwrap();
    assert!(apply_gates(&[zeros], &x).unwrap()[0].data().iter().all(|&v| v == 0.0));

    let mask: Vec<f64> = (0..48).map(|_| f64::from(rng.uniform() < 0.5)).collect();
    let soft: Vec<f64> = (0..48).map(|_| rng.uniform()).collect();
    let gates = [mask.clone(), soft.clone()].map(|g| Tensor::from_vec(g, &[2, 4, 6]).unwrap());
    let out = apply_gates(&gates, &x).unwrap();
    for i in 0..48 {
        let kept = if mask[i] == 1.0 { x.data()[i] } else { 0.0 };
        assert_eq!(out[0].data()[i], kept);
        assert_eq!(out[1].data()[i], soft[i] * x.data()[i]);
    }
    let wrong = Tensor::from_vec(vec![1.0; 24], &[1, 4, 6]).unwrap();
    assert!(apply_gates(&[wrong], &x).is_err());
}

#[test]
fn gates_stay_in_the_open_unit_interval() {
    let mut rng = Rng::seed_from_u64(4);
    for n in 1..=4 {
        let cfg = McgConfig {
            epsilons: (0..n).map(|i| i as f64 - 1.0).collect(),
            ..small_mcg()
        };
        let mcg = McgModel::<f64>::new(cfg, &mut rng).unwrap();
        let x = random(&mut rng, &[2, 9, 16]);
        let mut r = Rng::seed_from_u64(n as u64);
        let out = mcg.forward(&x, &Ctx::train(&mut r)).unwrap();
        assert_eq!(out.gates.len(), n);
        for g in &out.gates {
            assert_eq!(g.shape(), [2, 9, 16]);
            assert!(g.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}

#[test]
fn fused_output_sends_gradient_to_every_head_and_the_trunk() {
    let mut rng = Rng::seed_from_u64(5);
    let mcg = McgModel::<f64>::new(small_mcg(), &mut rng).unwrap();
    let x = random(&mut rng, &[2, 6, 16]);
    let mut r = Rng::seed_from_u64(0);
    mcg.forward(&x, &Ctx::train(&mut r)).unwrap().x_in.sum().backward().unwrap();
    let nonzero = |p: &Param<f64>| p.grad().is_some_and(|g| g.iter().any(|&v| v != 0.0));
    for h in &mcg.heads {
        assert!(nonzero(&h.weight), "{}", h.weight.name());
    }
    assert!(mcg.encoder[0].trainable_params().iter().any(nonzero));
    assert!(mcg.lstm.trainable_params().iter().any(nonzero));
    assert!(mcg.fc.trainable_params().iter().any(nonzero));
}

#[test]
fn paper_gate_network_shape_audit() {
    let cfg = McgConfig::paper();
    assert_eq!(cfg.bottleneck_bins(), 20);
    assert_eq!(cfg.channels.last().unwrap() * cfg.bottleneck_bins(), 1920);
    assert_eq!(cfg.last_decoder_channels(), 30);
    let mcg = McgModel::<f32>::new(cfg, &mut Rng::seed_from_u64(6)).unwrap();
    let x = Tensor::from_vec(vec![0.3f32; 50 * 80], &[1, 50, 80]).unwrap();
    let out = no_grad(|| mcg.forward(&x, &Ctx::eval())).unwrap();
    assert_eq!(out.x_in.shape(), [1, 50, 80]);
    for g in &out.gates {
        assert_eq!(g.shape(), [1, 50, 80]);
    }
}

#[test]
fn zeroed_sublayers_reduce_a_block_to_layer_norm() {
    let cfg = small_conformer();
    let mut rng = Rng::seed_from_u64(7);
    let block = ConformerBlock::<f64>::new("b", &cfg, &mut rng);
    zero(block.ffn1.trainable_params());
    zero(block.mhsa.trainable_params());
    zero(block.conv.trainable_params());
    zero(block.ffn2.trainable_params());
    let x = random(&mut rng, &[2, 5, 8]);
    let out = block.forward(&x, None, &mut Ctx::eval()).unwrap();
    for (row, got) in x.data().chunks(8).zip(out.data().chunks(8)) {
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        for (v, g) in row.iter().zip(got) {
            let expected = (v - mean) / (var + 1e-5).sqrt();
            assert!((g - expected).abs() < 1e-12, "{g} vs {expected}");
        }
    }
}

#[test]
fn attention_over_one_frame_is_the_value_path() {
    let cfg = small_conformer();
    let mut rng = Rng::seed_from_u64(8);
    let block = ConformerBlock::<f64>::new("b", &cfg, &mut rng);
    let x = random(&mut rng, &[3, 1, 8]);
    let attended = block.mhsa.attend(&x, None).unwrap();
    let expected = block.mhsa.out.forward(&block.mhsa.value.forward(&x).unwrap()).unwrap();
    for (a, e) in attended.data().iter().zip(expected.data()) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn encoder_subsamples_by_four_and_is_batch_independent_in_eval() {
    let mut rng = Rng::seed_from_u64(9);
    let asr = ConformerAsr::<f64>::new(small_conformer(), &mut rng).unwrap();
    let x = random(&mut rng, &[1, 100, 16]);
    let single = asr.forward(&x, &[100], &mut Ctx::eval()).unwrap();
    assert_eq!(single.logits.shape(), [1, 25, 5]);
    assert_eq!(single.lengths, [25]);

    let doubled = Tensor::concat(&[x.clone(), x.clone()], 0).unwrap();
    let both = asr.forward(&doubled, &[100, 100], &mut Ctx::eval()).unwrap();
    let n = single.logits.numel();
    assert_eq!(&both.logits.data()[..n], single.logits.data());
    assert_eq!(&both.logits.data()[n..], single.logits.data());

    let again = asr.forward(&x, &[100], &mut Ctx::eval()).unwrap();
    assert_eq!(again.logits.data(), single.logits.data());
}

#[test]
fn zero_ctc_head_gives_a_uniform_posterior() {
    let mut rng = Rng::seed_from_u64(10);
    let asr = ConformerAsr::<f64>::new(small_conformer(), &mut rng).unwrap();
    zero(asr.ctc_head.trainable_params());
    let x = random(&mut rng, &[1, 12, 16]);
    let out = asr.forward(&x, &[12], &mut Ctx::eval()).unwrap();
    let probs = out.logits.softmax();
    assert!(probs.data().iter().all(|&p| (p - 0.2).abs() < 1e-15));
}

#[test]
fn presets_normalize_input_with_batch_norm() {
    assert_eq!(ConformerConfig::paper(6).input_norm, InputNorm::BatchNorm);
    assert_eq!(ConformerConfig::desk(6).input_norm, InputNorm::BatchNorm);
    let asr = ConformerAsr::<f32>::new(ConformerConfig::desk(6), &mut Rng::seed_from_u64(0)).unwrap();
    assert!(asr.input_norm.is_some());
}
