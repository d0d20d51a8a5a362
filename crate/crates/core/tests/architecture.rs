use mna_core::layers::{Forward, Mode, MultiHeadAttention, MultiHeadAttentionConfig, ParamBuilder, ParamStore, BN_EPS};
use mna_core::model::{build_variant, Backbone, ScaleConfig, VariantKind, STEM_POOL, STEM_WINDOW};
use mna_core::tensor::{PoolKind, Tape, Tensor, Window3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn conv_params(c_in: usize, c_out: usize, k: usize) -> usize {
    c_in * c_out * k * k * k
}

#[test]
fn backbone_parameter_count_closed_form() {
    for channels in [[64, 128, 256, 512], [8, 16, 32, 64], [2, 2, 2, 2]] {
        let mut b = ParamBuilder::<f32>::new(0);
        Backbone::new(&mut b, 1, channels).unwrap();
        let store: ParamStore<f32> = b.finish();
        let mut expected = conv_params(1, channels[0], 7) + 2 * channels[0];
        let mut c_in = channels[0];
        for (i, &c) in channels.iter().enumerate() {
            expected += conv_params(c_in, c, 3) + conv_params(c, c, 3) + 4 * c;
            if i > 0 || c_in != c {
                expected += conv_params(c_in, c, 1) + 2 * c;
            }
            c_in = c;
        }
        expected += channels[3] + 1;
        assert_eq!(store.trainable_count(), expected, "{channels:?}");
    }
}

#[test]
fn variant_model_sets() {
    let s = ScaleConfig::desk();
    let count = |k| build_variant(k, &s).unwrap().len();
    assert_eq!(count(VariantKind::Full), 82);
    assert_eq!(count(VariantKind::NoAttention), 82);
    assert_eq!(count(VariantKind::NoPatch), 4);
    assert_eq!(count(VariantKind::NoPatchMultimodal), 4);
    assert_eq!(count(VariantKind::UnimodalMri), 1);
    assert_eq!(count(VariantKind::UnimodalPet), 1);
}

/// Plain-data reference pieces for the tiny-net oracle.
struct Ref<'a> {
    store: &'a ParamStore<f64>,
}

impl Ref<'_> {
    fn p(&self, name: &str) -> &Tensor<f64> {
        self.store.value(self.store.id(name).unwrap_or_else(|| panic!("{name}")))
    }

    fn conv(&self, x: &Tensor<f64>, name: &str, win: Window3) -> Tensor<f64> {
        let mut t = Tape::<f64>::new();
        let vx = t.leaf(x.clone(), false).unwrap();
        let vk = t.leaf(self.p(&format!("{name}.weight")).clone(), false).unwrap();
        let y = t.conv3d(vx, vk, win).unwrap();
        t.value(y).clone()
    }

    fn bn(&self, x: &Tensor<f64>, name: &str) -> Tensor<f64> {
        let (g, b) = (self.p(&format!("{name}.gamma")), self.p(&format!("{name}.beta")));
        let (m, v) = (self.p(&format!("{name}.running_mean")), self.p(&format!("{name}.running_var")));
        let s = x.shape();
        let inner: usize = s[2..].iter().product();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &val)| {
                let c = (i / inner) % s[1];
                g.data()[c] * (val - m.data()[c]) / (v.data()[c] + BN_EPS).sqrt() + b.data()[c]
            })
            .collect();
        Tensor::new(s.to_vec(), data).unwrap()
    }

    fn block(&self, x: &Tensor<f64>, name: &str, stride: usize, projection: bool) -> Tensor<f64> {
        let relu = |t: Tensor<f64>| t.map(|v| v.max(0.0));
        let y = relu(self.bn(&self.conv(x, &format!("{name}.conv1"), Window3::cube(3, stride, 1)), &format!("{name}.bn1")));
        let y = self.bn(&self.conv(&y, &format!("{name}.conv2"), Window3::cube(3, 1, 1)), &format!("{name}.bn2"));
        let skip = if projection {
            self.bn(
                &self.conv(x, &format!("{name}.shortcut"), Window3::cube(1, stride, 0)),
                &format!("{name}.shortcut_bn"),
            )
        } else {
            x.clone()
        };
        let sum: Vec<f64> = y.data().iter().zip(skip.data()).map(|(a, b)| (a + b).max(0.0)).collect();
        Tensor::new(y.shape().to_vec(), sum).unwrap()
    }
}

#[test]
fn tiny_backbone_matches_layer_composition() {
    let mut b = ParamBuilder::<f64>::new(11);
    let net = Backbone::new(&mut b, 1, [2, 2, 2, 2]).unwrap();
    let mut store: ParamStore<f64> = b.finish();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for name in ["stem.bn", "conv_block_2.bn1", "conv_block_4.shortcut_bn"] {
        for (suffix, lo) in [("gamma", 0.5), ("beta", -0.5), ("running_mean", -0.5), ("running_var", 0.5)] {
            let id = store.id(&format!("{name}.{suffix}")).unwrap();
            let t = store.value_mut(id);
            for v in t.data_mut() {
                *v = lo + rng.gen_range(0.0..1.0);
            }
        }
    }
    let x = Tensor::from_fn(vec![2, 1, 8, 8, 8], |i| ((i * 37 % 101) as f64 / 50.0) - 1.0);

    let mut f = Forward::new(&store, Mode::Eval, false);
    let vx = f.tape.leaf(x.clone(), false).unwrap();
    let (prob, feat) = net.forward(&mut f, vx).unwrap();

    let r = Ref { store: &store };
    let y = r.conv(&x, "stem.conv", STEM_WINDOW);
    let mut t = Tape::<f64>::new();
    let vy = t.leaf(y, false).unwrap();
    let pooled = t.pool3d(vy, PoolKind::Max, STEM_POOL).unwrap();
    let mut y = r.bn(t.value(pooled), "stem.bn").map(|v| v.max(0.0));
    for (i, stride) in [1, 2, 2, 2].into_iter().enumerate() {
        y = r.block(&y, &format!("conv_block_{}", i + 1), stride, net.blocks()[i].has_projection());
    }
    let s = y.shape().to_vec();
    let inner: usize = s[2..].iter().product();
    let feature: Vec<f64> = y.data().chunks(inner).map(|c| c.iter().sum::<f64>() / inner as f64).collect();
    let (w, bias) = (r.p("head.weight"), r.p("head.bias"));
    for n in 0..2 {
        let fz = &feature[n * 2..n * 2 + 2];
        for (a, b) in f.tape.value(feat).data()[n * 2..n * 2 + 2].iter().zip(fz) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        let logit = fz[0] * w.data()[0] + fz[1] * w.data()[1] + bias.data()[0];
        let p = 1.0 / (1.0 + (-logit).exp());
        assert!((f.tape.value(prob).data()[n] - p).abs() < 1e-9);
    }
}

#[test]
fn features_do_not_depend_on_the_head() {
    let mut b = ParamBuilder::<f32>::new(5);
    let net = Backbone::new(&mut b, 1, [4, 4, 4, 4]).unwrap();
    let mut store: ParamStore<f32> = b.finish();
    let x = Tensor::from_fn(vec![1, 1, 10, 12, 10], |i| ((i * 13 % 29) as f32) / 29.0);
    let run = |store: &ParamStore<f32>| {
        let mut f = Forward::new(store, Mode::Eval, false);
        let v = f.tape.leaf(x.clone(), false).unwrap();
        let (p, feat) = net.forward(&mut f, v).unwrap();
        (f.tape.value(p).data()[0], f.tape.value(feat).data().to_vec())
    };
    let (p0, f0) = run(&store);
    let head = store.id("head.weight").unwrap();
    for v in store.value_mut(head).data_mut() {
        *v += 1.0;
    }
    let (p1, f1) = run(&store);
    assert_eq!(f0, f1);
    assert_ne!(p0, p1);
    assert!(p0 > 0.0 && p0 < 1.0);
}

#[test]
fn four_head_attention_matches_per_head_formulas() {
    let (n, d, h) = (2, 8, 4);
    let dk = d / h;
    let mut b = ParamBuilder::<f64>::new(9);
    let mha = MultiHeadAttention::new(&mut b, "mha", MultiHeadAttentionConfig::new(d, h).unwrap()).unwrap();
    let store: ParamStore<f64> = b.finish();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut f = Forward::new(&store, Mode::Eval, false);
    let v = f.tape.leaf(Tensor::from_f64(vec![n, d], &x).unwrap(), false).unwrap();
    let (out, _) = mha.forward(&mut f, v).unwrap();

    let proj = |w: &Tensor<f64>, cols: usize| -> Vec<f64> {
        let mut o = vec![0.0; n * cols];
        for i in 0..n {
            for j in 0..cols {
                o[i * cols + j] = (0..d).map(|k| x[i * d + k] * w.data()[k * cols + j]).sum();
            }
        }
        o
    };
    let (heads, w0) = mha.param_ids();
    let mut concat = vec![0.0; n * d];
    for (hi, &(wq, wk, wv)) in heads.iter().enumerate() {
        let (q, k, vv) = (proj(store.value(wq), dk), proj(store.value(wk), dk), proj(store.value(wv), dk));
        for i in 0..n {
            let s: Vec<f64> = (0..n)
                .map(|j| (0..dk).map(|c| q[i * dk + c] * k[j * dk + c]).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let z: f64 = s.iter().map(|v| v.exp()).sum();
            for c in 0..dk {
                concat[i * d + hi * dk + c] = (0..n).map(|j| s[j].exp() / z * vv[j * dk + c]).sum();
            }
        }
    }
    let w0 = store.value(w0);
    for i in 0..n {
        for j in 0..d {
            let e: f64 = (0..d).map(|k| concat[i * d + k] * w0.data()[k * d + j]).sum();
            assert!((f.tape.value(out).data()[i * d + j] - e).abs() < 1e-9);
        }
    }
}
