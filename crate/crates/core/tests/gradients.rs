use ncvsd_core::nn::{DenoiserArch, Discriminator, MlpDenoiser, Parameterized, UncertaintyNet};
use ncvsd_core::rng::{normal_vec, standard_normal, stream, StreamRng};
use rand::Rng;

const CONFIGS: u64 = 20;
const H: f64 = 1e-6;

fn close(fd: f64, an: f64) -> bool {
    (fd - an).abs() <= f64::max(1e-5, 1e-3 * fd.abs())
}

fn randomize<N: Parameterized>(net: &mut N, rng: &mut StreamRng, scale: f64) {
    for v in net.params_mut() {
        *v = scale * standard_normal(rng);
    }
}

/// Checks every parameter of `net` against central differences of `loss`.
fn check_all<N: Parameterized + Clone>(
    net: &N,
    analytic: &[f64],
    loss: impl Fn(&N) -> f64,
    what: &str,
) {
    assert_eq!(analytic.len(), net.n_params());
    let mut probe = net.clone();
    for i in 0..net.n_params() {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + H;
        let lp = loss(&probe);
        probe.params_mut()[i] = orig - H;
        let lm = loss(&probe);
        probe.params_mut()[i] = orig;
        let fd = (lp - lm) / (2.0 * H);
        assert!(
            close(fd, analytic[i]),
            "{what}: parameter {i}: finite difference {fd} vs analytic {}",
            analytic[i]
        );
    }
}

fn random_arch(rng: &mut StreamRng) -> DenoiserArch {
    let dim = rng.random_range(1..4);
    let width = rng.random_range(3..7);
    let depth = rng.random_range(2..4);
    DenoiserArch::new(dim, width, depth, 0.5)
}

fn random_sigma(rng: &mut StreamRng) -> f64 {
    (rng.random::<f64>() * 4.0 - 2.0).exp()
}

#[test]
fn unconditioned_denoiser_backward_matches_finite_differences() {
    for c in 0..CONFIGS {
        let mut rng = stream(100, &[c]);
        let arch = random_arch(&mut rng);
        let mut net = MlpDenoiser::new(arch, &mut rng).unwrap();
        randomize(&mut net, &mut rng, 0.5);
        let x = normal_vec(&mut rng, arch.dim);
        let up = normal_vec(&mut rng, arch.dim);
        let sigma = random_sigma(&mut rng);
        let loss = |n: &MlpDenoiser| {
            n.forward(&x, sigma, None)
                .iter()
                .zip(&up)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let cache = net.forward_cached(&x, sigma, None);
        let mut grad = vec![0.0; net.n_params()];
        net.backward(&cache, &up, &mut grad);
        check_all(&net, &grad, loss, "denoiser");
    }
}

#[test]
fn conditioned_generator_backward_matches_finite_differences() {
    for c in 0..CONFIGS {
        let mut rng = stream(200, &[c]);
        let arch = random_arch(&mut rng);
        let base = MlpDenoiser::new(arch, &mut rng).unwrap();
        let mut net = MlpDenoiser::conditioned_from(&base).unwrap();
        randomize(&mut net, &mut rng, 0.5);
        net.set_merge_weight(0.1 + 0.8 * rng.random::<f64>());
        let y = normal_vec(&mut rng, arch.dim);
        let z = normal_vec(&mut rng, arch.dim);
        let up = normal_vec(&mut rng, arch.dim);
        let sigma = random_sigma(&mut rng);
        let loss = |n: &MlpDenoiser| {
            n.generate(&y, sigma, &z, 0.414)
                .iter()
                .zip(&up)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let cache = net.generate_cached(&y, sigma, &z, 0.414);
        let mut grad = vec![0.0; net.n_params()];
        net.backward(&cache, &up, &mut grad);
        check_all(&net, &grad, loss, "generator");
    }
}

#[test]
fn conditioned_score_model_backward_matches_finite_differences() {
    for c in 0..CONFIGS {
        let mut rng = stream(300, &[c]);
        let arch = random_arch(&mut rng);
        let base = MlpDenoiser::new(arch, &mut rng).unwrap();
        let mut net = MlpDenoiser::conditioned_from(&base).unwrap();
        randomize(&mut net, &mut rng, 0.5);
        net.set_merge_weight(0.1 + 0.8 * rng.random::<f64>());
        let x = normal_vec(&mut rng, arch.dim);
        let y = normal_vec(&mut rng, arch.dim);
        let up = normal_vec(&mut rng, arch.dim);
        let (t, sigma) = (random_sigma(&mut rng), random_sigma(&mut rng));
        // squared-error loss, as in training
        let target = normal_vec(&mut rng, arch.dim);
        let loss = |n: &MlpDenoiser| {
            n.forward(&x, t, Some((&y, sigma)))
                .iter()
                .zip(&target)
                .zip(&up)
                .map(|((o, tg), u)| u.abs() * (o - tg) * (o - tg))
                .sum::<f64>()
        };
        let cache = net.forward_cached(&x, t, Some((&y, sigma)));
        let g_out: Vec<f64> = cache
            .output
            .iter()
            .zip(&target)
            .zip(&up)
            .map(|((o, tg), u)| 2.0 * u.abs() * (o - tg))
            .collect();
        let mut grad = vec![0.0; net.n_params()];
        let g_x = net.backward_with_input(&cache, &g_out, &mut grad);
        check_all(&net, &grad, loss, "score model");
        for j in 0..arch.dim {
            let mut p = x.clone();
            let mut m = x.clone();
            p[j] += H;
            m[j] -= H;
            let lp: f64 = net
                .forward(&p, t, Some((&y, sigma)))
                .iter()
                .zip(&target)
                .zip(&up)
                .map(|((o, tg), u)| u.abs() * (o - tg) * (o - tg))
                .sum();
            let lm: f64 = net
                .forward(&m, t, Some((&y, sigma)))
                .iter()
                .zip(&target)
                .zip(&up)
                .map(|((o, tg), u)| u.abs() * (o - tg) * (o - tg))
                .sum();
            let fd = (lp - lm) / (2.0 * H);
            assert!(
                close(fd, g_x[j]),
                "score model input {j}: {fd} vs {}",
                g_x[j]
            );
        }
    }
}

#[test]
fn discriminator_backward_matches_finite_differences() {
    for c in 0..CONFIGS {
        let mut rng = stream(400, &[c]);
        let dim = rng.random_range(1..4);
        let width = rng.random_range(3..7);
        let depth = rng.random_range(1..3);
        let mut d = Discriminator::new(dim, width, depth, 0.5, &mut rng).unwrap();
        randomize(&mut d, &mut rng, 0.4);
        let x = normal_vec(&mut rng, dim);
        let y = normal_vec(&mut rng, dim);
        let (t, sigma) = (random_sigma(&mut rng), random_sigma(&mut rng));
        let real = c % 2 == 0;
        // non-saturating losses on either side
        let loss = |n: &Discriminator| {
            let l = n.forward_cached(&x, t, &y, sigma).logit;
            if real {
                -ncvsd_core::nn::log_sigmoid(l)
            } else {
                -ncvsd_core::nn::log_sigmoid(-l)
            }
        };
        let cache = d.forward_cached(&x, t, &y, sigma);
        assert!(cache.active());
        let d_logit = if real {
            cache.prob() - 1.0
        } else {
            cache.prob()
        };
        let mut grad = vec![0.0; d.n_params()];
        let g_x = d.backward_with_input(&cache, d_logit, &mut grad);
        check_all(&d, &grad, loss, "discriminator");
        for j in 0..dim {
            let mut p = x.clone();
            let mut m = x.clone();
            p[j] += H;
            m[j] -= H;
            let f = |v: &[f64]| {
                let l = d.forward_cached(v, t, &y, sigma).logit;
                if real {
                    -ncvsd_core::nn::log_sigmoid(l)
                } else {
                    -ncvsd_core::nn::log_sigmoid(-l)
                }
            };
            let fd = (f(&p) - f(&m)) / (2.0 * H);
            assert!(
                close(fd, g_x[j]),
                "discriminator input {j}: {fd} vs {}",
                g_x[j]
            );
        }
    }
}

#[test]
fn uncertainty_net_backward_matches_finite_differences() {
    for c in 0..CONFIGS {
        let mut rng = stream(500, &[c]);
        let width = rng.random_range(2..9);
        let mut net = UncertaintyNet::new(width, &mut rng);
        randomize(&mut net, &mut rng, 0.5);
        let t = (rng.random::<f64>() * 11.5 - 6.9).exp();
        let up = standard_normal(&mut rng);
        let cache = net.forward_cached(t);
        let mut grad = vec![0.0; net.n_params()];
        net.backward(&cache, up, &mut grad);
        check_all(
            &net,
            &grad,
            |n: &UncertaintyNet| up * n.forward(t),
            "uncertainty",
        );
    }
}

#[test]
fn non_finite_gradient_names_the_tensor() {
    let mut rng = stream(600, &[]);
    let net = MlpDenoiser::new(DenoiserArch::new(2, 4, 2, 0.5), &mut rng).unwrap();
    let mut grad = vec![0.0; net.n_params()];
    let last = grad.len() - 1;
    grad[last] = f64::NAN;
    let err = ncvsd_core::nn::check_finite_grad(&net, &grad).unwrap_err();
    assert!(err.to_string().contains("trunk.2.bias"), "{err}");
}

#[test]
fn forward_and_backward_are_bit_reproducible() {
    let mut rng = stream(700, &[]);
    let base = MlpDenoiser::new(DenoiserArch::new(2, 8, 3, 0.5), &mut rng).unwrap();
    let mut net = MlpDenoiser::conditioned_from(&base).unwrap();
    randomize(&mut net, &mut rng, 0.3);
    let run = || {
        let cache = net.forward_cached(&[0.1, 0.2], 0.7, Some((&[0.3, -0.4], 1.1)));
        let mut grad = vec![0.0; net.n_params()];
        net.backward(&cache, &[1.0, -0.5], &mut grad);
        (cache.output, grad)
    };
    assert_eq!(run(), run());
}
