//! The gradient reversal layer: identity forward, `-lambda` times the
//! gradient backward, with the warm-up schedule used during adaptation.
//!
//! `cargo run --example gradient_reversal`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shadowsense::adversarial::{grl_schedule, Discriminator};
use shadowsense::nn::{sample_normal, Conv, ParamStore, Session};
use shadowsense::Tensor;

fn grads(store: &ParamStore, x: &Tensor, lambda: Option<f32>) -> (Vec<f32>, f32) {
    let trainable = |n: &str| n.starts_with("feat.");
    let mut s = Session::new(store, &trainable);
    let xv = s.input(x.clone());
    let f = Conv::new("feat", 1, 8, 3, 1).forward(&mut s, xv).unwrap();
    let f = s.graph.relu(f);
    let f = match lambda {
        Some(l) => s.graph.grl(f, l),
        None => f,
    };
    let disc = Discriminator::new(3, 8, false);
    let out = disc.forward(&mut s, f, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let n = s.value(out.logits).len();
    let loss = s.graph.domain_focal(out.logits, vec![1.0; n], vec![1.0; n], 2.0, 1e-7).unwrap();
    let value = s.value(loss).item();
    let mut g = s.graph.backward(loss).unwrap();
    (s.named_grads(&mut g)["feat.w"].data().to_vec(), value)
}

fn main() {
    println!("schedule: {:?}", [0, 100, 250, 500, 1000].map(|i| (i, grl_schedule(i, 1000))));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    Conv::new("feat", 1, 8, 3, 1).init(&mut store, &mut rng);
    Discriminator::new(3, 8, false).init(&mut store, &mut rng);
    let x = Tensor::new(vec![2, 1, 8, 8], (0..128).map(|_| sample_normal(&mut rng)).collect()).unwrap();

    let lambda = 0.6;
    let (plain, l0) = grads(&store, &x, None);
    let (reversed, l1) = grads(&store, &x, Some(lambda));
    assert_eq!(l0.to_bits(), l1.to_bits(), "forward pass must be untouched");
    let num: f64 = plain.iter().zip(&reversed).map(|(p, r)| (*r as f64 + lambda as f64 * *p as f64).powi(2)).sum();
    let den: f64 = plain.iter().map(|p| (lambda as f64 * *p as f64).powi(2)).sum();
    println!("loss {l0} (identical with and without reversal)");
    println!("relative error of reversed gradient vs -lambda * plain: {:.3e}", (num / den).sqrt());
}
