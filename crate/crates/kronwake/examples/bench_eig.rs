use kronwake::tensor::{damped_inverse, Matrix};
use std::time::Instant;

fn main() {
    for n in [129usize, 785] {
        let mut m = Matrix::zeros(n, n);
        for k in 0..32 {
            let col: Vec<f64> = (0..n).map(|i| ((i * (k + 3)) as f64 * 0.01).sin()).collect();
            for i in 0..n {
                for j in 0..n {
                    let v = m.get(i, j) + col[i] * col[j] / 32.0;
                    m.set(i, j, v);
                }
            }
        }
        for i in 0..n {
            m.set(i, i, m.get(i, i) + 0.05);
        }
        let t = Instant::now();
        let inv = damped_inverse(&m, 0.01).unwrap();
        let dt = t.elapsed().as_secs_f64();
        println!("n = {n}: damped_inverse took {dt:.2} s (checksum {:.3e})", inv.max_abs());
    }
}
