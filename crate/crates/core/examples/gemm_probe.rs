//! Scratch microbenchmark for conv GEMM shapes.

use std::time::Instant;

use illumap_core::scalar::Scalar;

fn bench(label: &str, reps: usize, mut f: impl FnMut()) {
    f();
    let t = Instant::now();
    for _ in 0..reps {
        f();
    }
    let per = t.elapsed().as_secs_f64() / reps as f64;
    println!("{label}: {:.3} ms", per * 1e3);
}

static COLD_NS: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);

fn main() {
    // level-0 conv, batch 8: c_out=16, c_in=16, spatial 64x64 padded 66x66
    let shapes = [
        ("l0", 16usize, 16usize, 8 * 66 * 66 - 2 * 66 - 2),
        ("l1", 32, 32, 8 * 34 * 34 - 2 * 34 - 2),
        ("l2", 64, 64, 8 * 18 * 18 - 2 * 18 - 2),
        ("l3", 128, 128, 8 * 10 * 10 - 2 * 10 - 2),
        ("l4", 256, 256, 8 * 6 * 6 - 2 * 6 - 2),
    ];
    for (name, m, k, n) in shapes {
        let a = vec![1.0f32; m * k];
        let b = vec![1.0f32; k * n + 8];
        let mut c = vec![0.0f32; m * n];
        let flop = 2.0 * (m * k * n) as f64 * 9.0;
        bench(&format!("{name} taps 9x [{m}x{k}x{n}] ({:.0} MFLOP)", flop / 1e6), 20, || {
            for tap in 0..9 {
                f32::gemm(m, k, n, &a, k, 1, &b[tap..tap + k * n], n, 1, &mut c, n, tap > 0);
            }
        });
        let kk = k * 9;
        let a2 = vec![1.0f32; m * kk];
        let b2 = vec![1.0f32; kk * n];
        bench(&format!("{name} im2col [{m}x{kk}x{n}]"), 20, || {
            f32::gemm(m, kk, n, &a2, kk, 1, &b2, n, 1, &mut c, n, false);
        });
        let mut scratch = vec![0u8; 16 << 20];
        bench(&format!("{name} chunked 2048 cold"), 20, || {
            for v in scratch.iter_mut() {
                *v = v.wrapping_add(1);
            }
            let t = Instant::now();
            let mut j0 = 0;
            while j0 < n {
                let j1 = (j0 + 2048).min(n);
                let nb = j1 - j0;
                for tap in 0..9 {
                    f32::gemm(
                        m,
                        k,
                        nb,
                        &a,
                        k,
                        1,
                        &b[tap + j0..tap + j0 + (k - 1) * n + nb],
                        n,
                        1,
                        &mut c[j0..j0 + (m - 1) * n + nb],
                        n,
                        tap > 0,
                    );
                }
                j0 = j1;
            }
            COLD_NS.fetch_add(t.elapsed().as_nanos() as u64, std::sync::atomic::Ordering::Relaxed);
        });
        println!(
            "  cold inner: {:.3} ms",
            COLD_NS.swap(0, std::sync::atomic::Ordering::Relaxed) as f64 / 21.0 / 1e6
        );
        for chunk in [1024usize, 2048, 4096, 8192] {
            bench(&format!("{name} chunked {chunk}"), 20, || {
                let mut j0 = 0;
                while j0 < n {
                    let j1 = (j0 + chunk).min(n);
                    let nb = j1 - j0;
                    for tap in 0..9 {
                        f32::gemm(
                            m,
                            k,
                            nb,
                            &a,
                            k,
                            1,
                            &b[tap + j0..tap + j0 + (k - 1) * n + nb],
                            n,
                            1,
                            &mut c[j0..j0 + (m - 1) * n + nb],
                            n,
                            tap > 0,
                        );
                    }
                    j0 = j1;
                }
            });
        }
    }
}
