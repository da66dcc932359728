use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tensorcore::{FeatureNet, Tensor};

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mlp = FeatureNet::new(None, vec![], 20, FeatureNet::mlp_layers(&[256, 256], 1)).unwrap();
    let p = mlp.init_params(&mut rng);
    let v = Tensor::<f32>::filled(vec![256, 20], 0.3);
    let t = Instant::now();
    for _ in 0..50 {
        let (y, c) = mlp.forward(&p, None, &v).unwrap();
        let _ = mlp.backward(&p, &c, &y, false).unwrap();
    }
    println!("mlp 256x256 batch256 fwd+bwd: {:.2} ms", t.elapsed().as_secs_f64() * 1000.0 / 50.0);

    let conv = FeatureNet::new(
        Some([32, 32, 3]),
        FeatureNet::conv_layers(&[16, 32, 64], false),
        0,
        FeatureNet::mlp_layers(&[256, 256], 64),
    )
    .unwrap();
    let p = conv.init_params(&mut rng);
    let img = Tensor::<f32>::filled(vec![256, 32, 32, 3], 0.3);
    let e = Tensor::<f32>::zeros(vec![256, 0]);
    let t = Instant::now();
    for _ in 0..5 {
        let _ = conv.infer(&p, Some(&img), &e).unwrap();
    }
    println!("conv(16,32,64) batch256 fwd: {:.2} ms", t.elapsed().as_secs_f64() * 1000.0 / 5.0);
    let t = Instant::now();
    for _ in 0..5 {
        let (y, c) = conv.forward(&p, Some(&img), &e).unwrap();
        let _ = conv.backward(&p, &c, &y, false).unwrap();
    }
    println!("conv(16,32,64) batch256 fwd+bwd: {:.2} ms", t.elapsed().as_secs_f64() * 1000.0 / 5.0);
}
