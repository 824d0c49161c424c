use lrdnet::synth::{derive_seed, fft2, gen_fake, gen_real, generate, SyntheticDatasetSpec};
use lrdnet::{Family, Label, LabeledImage};
use rustfft::num_complex::Complex;

const SIZE: usize = 64;

fn plane_power(plane: &[f64], s: usize) -> Vec<f64> {
    let mean = plane.iter().sum::<f64>() / plane.len() as f64;
    let mut spectrum: Vec<Complex<f64>> = plane.iter().map(|&v| Complex::new(v - mean, 0.0)).collect();
    fft2(&mut spectrum, s, s, false);
    spectrum.iter().map(|c| c.norm_sqr()).collect()
}

/// Mean-removed power summed over the three channels, row-major `[ky][kx]`.
fn power(img: &LabeledImage) -> Vec<f64> {
    let s = img.size();
    let d = img.pixels.data();
    let mut total = vec![0.0; s * s];
    for c in 0..3 {
        let plane: Vec<f64> = d[c * s * s..(c + 1) * s * s].iter().map(|&v| v as f64).collect();
        for (t, p) in total.iter_mut().zip(plane_power(&plane, s)) {
            *t += p;
        }
    }
    total
}

/// Power of the mean-removed gray plane.
fn gray_power(img: &LabeledImage) -> Vec<f64> {
    let s = img.size();
    let d = img.pixels.data();
    let gray: Vec<f64> = (0..s * s)
        .map(|i| (0..3).map(|c| d[c * s * s + i] as f64).sum::<f64>() / 3.0)
        .collect();
    plane_power(&gray, s)
}

/// Signed frequency of bin `k` in cycles per pixel.
fn freq(k: usize, n: usize) -> f64 {
    let k = if k > n / 2 { k as f64 - n as f64 } else { k as f64 };
    k / n as f64
}

fn radius(kx: usize, ky: usize, n: usize) -> f64 {
    freq(kx, n).hypot(freq(ky, n))
}

/// Share of energy beyond half the Nyquist frequency.
fn high_fraction(img: &LabeledImage) -> f64 {
    let p = power(img);
    let s = img.size();
    let (mut hi, mut all) = (0.0, 0.0);
    for ky in 0..s {
        for kx in 0..s {
            let e = p[ky * s + kx];
            all += e;
            if radius(kx, ky, s) > 0.25 {
                hi += e;
            }
        }
    }
    hi / all
}

fn real(i: u64) -> LabeledImage {
    gen_real(derive_seed(42, 0, i), SIZE).unwrap()
}

#[test]
fn reals_are_band_limited_and_in_range() {
    for seed in 0..100 {
        let img = gen_real(seed, SIZE).unwrap();
        assert!(img.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let f = high_fraction(&img);
        assert!(f < 0.10, "seed {seed}: {f}");
    }
    assert!(gen_real(0, 31).is_err());
}

#[test]
fn generators_are_deterministic() {
    assert_eq!(gen_real(5, SIZE).unwrap(), gen_real(5, SIZE).unwrap());
    assert_ne!(gen_real(5, SIZE).unwrap(), gen_real(6, SIZE).unwrap());
    let base = real(1);
    for f in Family::ALL {
        assert_eq!(gen_fake(&base, f, 9).unwrap(), gen_fake(&base, f, 9).unwrap());
    }
    let ds = SyntheticDatasetSpec {
        seed: 3,
        n_real: 4,
        n_fake_per_family: 2,
        families: Family::ALL.to_vec(),
        image_size: 32,
    };
    let a = generate(&ds).unwrap();
    assert_eq!(a, generate(&ds).unwrap());
    assert_eq!(a.len(), 10);
    assert_eq!(a.iter().filter(|d| d.label == Label::Real).count(), 4);
}

#[test]
fn fakes_need_a_real_base_and_a_known_family() {
    let (fake, _) = gen_fake(&real(0), Family::FeProxy, 1).unwrap();
    assert_eq!((fake.label, fake.family), (Label::Fake, Some(Family::FeProxy)));
    assert!(gen_fake(&fake, Family::T2iProxy, 1).is_err());
    assert!("gan_proxy".parse::<Family>().is_err());
}

#[test]
fn face_edit_stays_inside_its_patch() {
    for i in 0..20 {
        let base = real(i);
        let (fake, info) = gen_fake(&base, Family::FeProxy, 100 + i).unwrap();
        let (x0, y0, w, h) = info.patch.expect("patch recorded");
        let (a, b) = (base.pixels.data(), fake.pixels.data());
        let mut inside = 0.0f32;
        for c in 0..3 {
            for y in 0..SIZE {
                for x in 0..SIZE {
                    let k = (c * SIZE + y) * SIZE + x;
                    let d = (a[k] - b[k]).abs();
                    if (x0..x0 + w).contains(&x) && (y0..y0 + h).contains(&y) {
                        inside = inside.max(d);
                    } else {
                        assert!(d <= 1e-6, "pixel ({x}, {y}) moved by {d}");
                    }
                }
            }
        }
        assert!(inside > 1e-3);
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn text_to_image_peaks_stand_out() {
    for i in 0..20 {
        let (fake, info) = gen_fake(&real(i), Family::T2iProxy, 200 + i).unwrap();
        assert_eq!(info.frequencies.len(), 2);
        let p = gray_power(&fake);
        let mag = |kx: usize, ky: usize| p[(ky % SIZE) * SIZE + (kx % SIZE)].sqrt();
        for &(kx, ky) in &info.frequencies {
            let mut around = Vec::new();
            for dy in -3i64..=3 {
                for dx in -3i64..=3 {
                    if (dx, dy) != (0, 0) {
                        let x = (kx as i64 + dx).rem_euclid(SIZE as i64) as usize;
                        let y = (ky as i64 + dy).rem_euclid(SIZE as i64) as usize;
                        around.push(mag(x, y));
                    }
                }
            }
            let ratio = mag(kx, ky) / median(around);
            assert!(ratio >= 5.0, "image {i} bin ({kx}, {ky}): {ratio}");
        }
    }
}

#[test]
fn high_band_energy_separates_reals_from_text_to_image() {
    let n = 120;
    let reals: Vec<f64> = (0..n).map(|i| high_fraction(&real(i))).collect();
    let fakes: Vec<f64> = (0..n)
        .map(|i| high_fraction(&gen_fake(&real(1000 + i), Family::T2iProxy, i).unwrap().0))
        .collect();
    // Fit the threshold on the first half, score on the second.
    let half = n as usize / 2;
    let mut cands: Vec<f64> = reals[..half].iter().chain(&fakes[..half]).copied().collect();
    cands.sort_by(f64::total_cmp);
    let score = |t: f64, r: &[f64], f: &[f64]| {
        let ok = r.iter().filter(|&&v| v < t).count() + f.iter().filter(|&&v| v >= t).count();
        ok as f64 / (r.len() + f.len()) as f64
    };
    let t = cands
        .iter()
        .copied()
        .max_by(|&a, &b| score(a, &reals[..half], &fakes[..half]).total_cmp(&score(b, &reals[..half], &fakes[..half])))
        .unwrap();
    let acc = score(t, &reals[half..], &fakes[half..]);
    assert!(acc >= 0.90, "held-out probe accuracy {acc}");
}

/// Mean-removed energy in eight radial bands, normalized to sum to one.
fn signature(img: &LabeledImage) -> [f64; 8] {
    let p = power(img);
    let mut bands = [0.0; 8];
    for ky in 0..SIZE {
        for kx in 0..SIZE {
            let r = radius(kx, ky, SIZE) / (0.5 * std::f64::consts::SQRT_2);
            let b = ((r * 8.0) as usize).min(7);
            bands[b] += p[ky * SIZE + kx];
        }
    }
    let total: f64 = bands.iter().sum();
    bands.map(|v| v / total)
}

fn welch_t(a: &[f64], b: &[f64]) -> f64 {
    let stats = |v: &[f64]| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, var / n)
    };
    let ((ma, sa), (mb, sb)) = (stats(a), stats(b));
    (ma - mb) / (sa + sb).sqrt()
}

#[test]
fn fake_families_have_distinct_spectra() {
    let n = 60;
    let sigs: Vec<Vec<[f64; 8]>> = Family::ALL
        .iter()
        .map(|&f| (0..n).map(|i| signature(&gen_fake(&real(i), f, 300 + i).unwrap().0)).collect())
        .collect();
    for a in 0..3 {
        for b in a + 1..3 {
            let best = (0..8)
                .map(|k| {
                    let xa: Vec<f64> = sigs[a].iter().map(|s| s[k]).collect();
                    let xb: Vec<f64> = sigs[b].iter().map(|s| s[k]).collect();
                    welch_t(&xa, &xb).abs()
                })
                .fold(0.0, f64::max);
            assert!(best > 5.0, "{} vs {}: max |t| {best}", Family::ALL[a], Family::ALL[b]);
        }
    }
}
