use std::time::Instant;

use cospeech_autograd::nn::Encoder;
use cospeech_autograd::{Graph, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f32>::new();
    let enc = Encoder::new(&mut store, "e", 10, 64, 4, 4, Some(64), &mut rng);
    let (b, l) = (16, 62);
    let x = Tensor::from_fn(b * l, 64, |r, c| ((r * 7 + c * 3) % 11) as f32 * 0.1);
    let blocks: Vec<_> = (0..b).map(|i| (i * l, l)).collect();
    for _ in 0..5 {
        let t = Instant::now();
        let mut g = Graph::new(&store);
        let xi = g.input(x.clone());
        let y = enc.forward(&mut g, xi, &blocks).unwrap();
        let w = Tensor::full(b * l, 64, 1.0f32);
        let loss = g.external_scalar(y, 0.0, w).unwrap();
        let t1 = t.elapsed();
        let _ = g.backward(loss).unwrap();
        println!("fwd {:?} total {:?}", t1, t.elapsed());
    }
}
