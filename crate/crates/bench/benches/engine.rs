use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxformer_core::encoder::{Encoder, EncoderConfig};
use voxformer_core::{ParamStore, Tape, Tensor};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = random(&mut rng, &[151, 64]);
    let b = random(&mut rng, &[64, 256]);
    let store = ParamStore::<f32>::new();
    c.bench_function("matmul 151x64x256", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new(&store);
            let x = tape.constant(a.clone());
            let y = tape.constant(b.clone());
            tape.matmul(x, y).unwrap()
        })
    });
}

fn attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::<f32>::new();
    let qkv = store.add("qkv", random(&mut rng, &[151, 192])).unwrap();
    let target = random(&mut rng, &[151, 64]);
    c.bench_function("attention forward+backward 151 tokens 4 heads", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new(&store);
            let x = tape.param(qkv);
            let (out, _) = tape.attention(x, 4, false).unwrap();
            let t = tape.constant(target.clone());
            let loss = tape.mse_loss(out, t).unwrap();
            tape.backward(loss).unwrap()
        })
    });
}

fn encoder(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::<f32>::new();
    let enc = Encoder::new(&mut store, &mut rng, "enc", EncoderConfig::default(), 150, 216).unwrap();
    let patches = random(&mut rng, &[150, 216]);
    let positions: Vec<usize> = (0..150).collect();
    c.bench_function("encoder forward 150 tokens", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new(&store);
            let p = tape.constant(patches.clone());
            enc.forward(&mut tape, p, &positions, false).unwrap().output
        })
    });
}

criterion_group!(benches, matmul, attention, encoder);
criterion_main!(benches);
