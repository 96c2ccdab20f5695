use rand::SeedableRng;
use synthrefine_tape::{Tape, Tensor};

fn main() {
    let mut rng = rand::rngs::StdRng::seed_from_u64(0);
    for &(c, hw) in &[(16usize, 64usize), (8, 64), (64, 8), (3, 64)] {
        let x = Tensor::<f32>::randn(&[1, c, hw, hw], 1.0, &mut rng);
        let w = Tensor::<f32>::randn(&[16, c, 3, 3], 1.0, &mut rng);
        let t0 = std::time::Instant::now();
        for _ in 0..50 {
            let tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let wv = tape.leaf(w.clone());
            let y = tape.conv2d(xv, wv, None, 1, 1);
            let l = tape.sum(y);
            let _ = tape.backward(l);
        }
        println!("c={c} hw={hw} fwd+bwd {:?}", t0.elapsed() / 50);
    }
}
