use polrouter::polmath::{hermitian_eigen, process_fidelity, state_fidelity, DensityMatrix2, JonesVector, Pauli, ProcessMatrix};
use polrouter::router::{
    half_wave_voltage, router_channel, router_channel_common_frame, routing_voltage, Port, RouterConfig,
};
use polrouter::tomography::{
    apply_process, invert_h_coordinate, mle_process_tomography, simulate_tomography, MleOptions, Sampling,
};
use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn reconstruct(chi: &ProcessMatrix, sampling: Sampling) -> ProcessMatrix {
    let data = simulate_tomography(chi, 10_000, sampling).unwrap();
    mle_process_tomography(&data, &MleOptions::default()).unwrap().estimate
}

#[test]
fn port_two_needs_the_h_inversion() {
    let cfg = RouterConfig::ideal();
    let u_pi = half_wave_voltage(&cfg).unwrap();
    let z = ProcessMatrix::pauli_channel(Pauli::Z);
    let id = ProcessMatrix::identity();
    for input in Port::BOTH {
        let v = routing_voltage(input, Port::Two, u_pi);
        let raw = reconstruct(&router_channel(&cfg, input, Port::Two, v).unwrap(), Sampling::Analytic);
        let common = reconstruct(&router_channel_common_frame(&cfg, input, Port::Two, v).unwrap(), Sampling::Analytic);
        assert!(process_fidelity(&z, &raw).unwrap() > 1.0 - 1e-4);
        assert!(process_fidelity(&id, &common).unwrap() > 1.0 - 1e-4);
        // The two reconstructions differ exactly by conjugation with σ_Z.
        assert!((invert_h_coordinate(&raw).matrix() - common.matrix()).norm() < 1e-6);
    }
}

#[test]
fn ideal_router_maintains_random_states() {
    let cfg = RouterConfig::ideal();
    let u_pi = half_wave_voltage(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..50 {
        let psi = JonesVector::normalize(
            C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5),
            C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5),
        )
        .unwrap();
        let rho = DensityMatrix2::pure(&psi);
        for input in Port::BOTH {
            for output in Port::BOTH {
                let chi = router_channel_common_frame(&cfg, input, output, routing_voltage(input, output, u_pi)).unwrap();
                let out = apply_process(&chi, &rho).state(true).unwrap();
                assert!(state_fidelity(&rho, &out).unwrap() >= 1.0 - 1e-9);
            }
        }
    }
}

#[test]
fn estimates_are_valid_process_matrices() {
    let cfg = RouterConfig::calibrated();
    let u_pi = half_wave_voltage(&cfg).unwrap();
    for (k, output) in Port::BOTH.into_iter().enumerate() {
        let chi = router_channel_common_frame(&cfg, Port::One, output, routing_voltage(Port::One, output, u_pi)).unwrap();
        let est = reconstruct(&chi, Sampling::Binomial { seed: 9 + k as u64 });
        let m = est.to_dynamic();
        assert!((&m - m.adjoint()).norm() < 1e-12);
        assert!((m.trace().re - 1.0).abs() < 1e-12);
        assert!(hermitian_eigen(&m).0[0] > -1e-12);
        assert!(est.tp_residual() < 1e-5);
        assert!(process_fidelity(&chi, &est).unwrap() > 0.99);
    }
}
