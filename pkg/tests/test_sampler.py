import numpy as np
import pytest

from dcflow.crystal import validate
from dcflow.geometry import (FlowState, lattice_to_unconstrained, sample_priors,
                             simplex_to_sphere, sphere_log, wrap)
from dcflow.sampler import (Condition, EmpiricalSizeSampler, SamplerConfig,
                            finalize, integrate, model_velocity_fn, sample,
                            sample_batch, sample_csp_batch)
from dcflow.training import TrainingConfig, train
from dcflow.data_io import default_toy_template, make_toy_dataset
from dcflow.velocity_net import NetConfig, VelocityBundle, VelocityNet


def zero_field(states, t):
    return [VelocityBundle(lattice=np.zeros(6),
                           coords=np.zeros_like(s.positions),
                           species=np.zeros_like(s.species),
                           pos_weights=np.zeros_like(s.pos_weights))
            for s in states]


def true_conditional_field(crystal, prior, remove_translation=False):
    """Exact conditional velocities of the geodesic path from prior to data.

    Sphere fields return the parallel-transported geodesic velocity at time t.
    With remove_translation the coordinate field uses the mean-removed
    displacement, reproducing the training-time quotient construction.
    """
    lat_v = lattice_to_unconstrained(crystal.lattice) - prior.lattice_u
    coord_v = wrap(crystal.positions_tensor() - prior.positions)
    if remove_translation:
        coord_v = coord_v - coord_v[:, 0:1, :].mean(axis=0, keepdims=True)
    xs0 = simplex_to_sphere(prior.species)
    vs = sphere_log(xs0, simplex_to_sphere(crystal.species_matrix()))
    ths = np.linalg.norm(vs, axis=-1, keepdims=True)
    xw0 = simplex_to_sphere(prior.pos_weights)
    vw = sphere_log(xw0, simplex_to_sphere(crystal.weights_matrix()))
    thw = np.linalg.norm(vw, axis=-1, keepdims=True)

    def field(states, t):
        s_vel = -ths * np.sin(t * ths) * xs0 + np.cos(t * ths) * vs
        w_vel = -thw * np.sin(t * thw) * xw0 + np.cos(t * thw) * vw
        return [VelocityBundle(lattice=lat_v, coords=coord_v,
                               species=s_vel, pos_weights=w_vel)]
    return field


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            SamplerConfig(steps=0)
        with pytest.raises(ValueError):
            SamplerConfig(slope=-1.0)
        with pytest.raises(ValueError):
            SamplerConfig(task="foo")


class TestIntegration:
    def test_single_step_zero_velocity_returns_prior(self, rng):
        prior = sample_priors(3, 5, 2, rng)
        snapshot = prior.copy()
        cfg = SamplerConfig(steps=1, slope=0.0, task="dng")
        integrate([prior], zero_field, cfg)
        assert np.array_equal(prior.lattice_u, snapshot.lattice_u)
        assert np.array_equal(prior.positions, snapshot.positions)
        assert np.abs(prior.species - snapshot.species).max() < 1e-12
        assert np.abs(prior.pos_weights - snapshot.pos_weights).max() < 1e-12

    def test_true_conditional_field_reaches_data(self, tiny_crystal, rng):
        prior = sample_priors(tiny_crystal.n_sites, 5, 2, rng)
        field = true_conditional_field(tiny_crystal, prior)
        state = prior.copy()
        integrate([state], field, SamplerConfig(steps=1000, slope=0.0, task="dng"))
        assert np.abs(state.lattice_u
                      - lattice_to_unconstrained(tiny_crystal.lattice)).max() < 1e-6
        assert np.abs(wrap(state.positions
                           - tiny_crystal.positions_tensor())).max() < 1e-6
        assert np.abs(state.species - tiny_crystal.species_matrix()).max() < 1e-6
        assert np.abs(state.pos_weights - tiny_crystal.weights_matrix()).max() < 1e-6

    def test_simplex_preserved_every_step(self, rng):
        net = VelocityNet(NetConfig(d_elements=5, l_max=2, hidden_dim=16,
                                    num_layers=1, n_freq=4, n_max=8,
                                    zero_init_heads=False), seed=0)
        net.eval()
        prior = sample_priors(3, 5, 2, rng)
        worst = {"norm": 0.0}
        base_fn = model_velocity_fn(net)

        def checking_field(states, t):
            for s in states:
                for arr in (s.species, s.pos_weights):
                    norms = np.linalg.norm(np.sqrt(np.clip(arr, 0, None)), axis=-1)
                    worst["norm"] = max(worst["norm"], np.abs(norms - 1.0).max())
                    assert arr.min() >= 0.0
            return base_fn(states, t)

        integrate([prior], checking_field, SamplerConfig(steps=50, slope=20.0,
                                                         task="dng"))
        assert worst["norm"] < 1e-8

    def test_csp_conditioning_bit_exact(self, tiny_crystal, rng):
        net = VelocityNet(NetConfig(d_elements=5, l_max=2, hidden_dim=16,
                                    num_layers=1, n_freq=4, n_max=8,
                                    zero_init_heads=False), seed=1)
        net.eval()
        cond = Condition.from_crystal(tiny_crystal)
        prior = sample_priors(4, 5, 2, rng)
        cfg = SamplerConfig(steps=20, slope=20.0, task="csp")
        integrate([prior], model_velocity_fn(net), cfg, [cond])
        assert np.array_equal(prior.species, cond.species)
        assert np.array_equal(prior.pos_weights, cond.pos_weights)
        # inactive coordinate channels pinned at the zero-padding convention
        assert np.all(prior.positions[cond.pos_weights == 0.0] == 0.0)

    def test_nonfinite_aborts_with_step(self, rng):
        prior = sample_priors(2, 5, 2, rng)

        def bad_field(states, t):
            out = zero_field(states, t)
            out[0].lattice = np.full(6, np.nan)
            return out

        with pytest.raises(RuntimeError, match="step 0"):
            integrate([prior], bad_field, SamplerConfig(steps=3, task="dng"))


class TestAntiAnnealing:
    def test_slope_zero_matches_reference_euler(self, rng):
        """Frozen random model: the production integrator at slope 0 must
        agree with an independently coded plain-Euler reference."""
        net = VelocityNet(NetConfig(d_elements=5, l_max=2, hidden_dim=16,
                                    num_layers=2, n_freq=4, n_max=8,
                                    zero_init_heads=False), seed=5)
        net.eval()
        prior = sample_priors(3, 5, 2, rng)
        ref = prior.copy()

        # Reference: textbook Euler loop written independently of integrate().
        steps = 200
        dt = 1.0 / steps
        for k in range(steps):
            vb = net.predict(ref, k * dt)
            ref.lattice_u = ref.lattice_u + dt * vb.lattice
            ref.positions = (ref.positions + dt * vb.coords) % 1.0
            for name, vel in (("species", vb.species), ("pos_weights", vb.pos_weights)):
                mu = getattr(ref, name)
                x = np.sqrt(mu)
                v = vel - (vel * x).sum(-1, keepdims=True) * x
                theta = np.linalg.norm(dt * v, axis=-1, keepdims=True)
                with np.errstate(invalid="ignore"):
                    sinc = np.where(theta < 1e-12, 1.0, np.sin(theta) / np.where(theta == 0, 1, theta))
                x_new = np.cos(theta) * x + sinc * dt * v
                x_new /= np.linalg.norm(x_new, axis=-1, keepdims=True)
                setattr(ref, name, x_new ** 2)

        state = prior.copy()
        integrate([state], model_velocity_fn(net),
                  SamplerConfig(steps=steps, slope=0.0, task="dng"))
        assert np.abs(state.lattice_u - ref.lattice_u).max() < 1e-9
        assert np.abs(wrap(state.positions - ref.positions)).max() < 1e-9
        assert np.abs(state.species - ref.species).max() < 1e-9
        assert np.abs(state.pos_weights - ref.pos_weights).max() < 1e-9

    def test_slope_scales_coordinate_updates_only(self, rng):
        prior = sample_priors(2, 5, 2, rng)
        a = prior.copy()
        b = prior.copy()

        def constant_field(states, t):
            return [VelocityBundle(lattice=np.ones(6) * 0.1,
                                   coords=np.full_like(s.positions, 0.001),
                                   species=np.zeros_like(s.species),
                                   pos_weights=np.zeros_like(s.pos_weights))
                    for s in states]

        integrate([a], constant_field, SamplerConfig(steps=100, slope=0.0, task="dng"))
        integrate([b], constant_field, SamplerConfig(steps=100, slope=20.0, task="dng"))
        assert np.abs(a.lattice_u - b.lattice_u).max() < 1e-12
        # integral of (1 + 20 t) over the step grid scales displacement
        da = wrap(a.positions - prior.positions)
        db = wrap(b.positions - prior.positions)
        factor = np.mean(1.0 + 20.0 * np.arange(100) / 100.0)
        assert np.allclose(db, da * factor, atol=1e-12)


class TestFinalize:
    def test_simplex_validity_of_outputs(self, rng):
        state = sample_priors(3, 5, 2, rng)
        crystal, meta = finalize(state, SamplerConfig(steps=10, task="dng"),
                                 element_vocab=(8, 22, 26, 38, 56))
        msgs = [m for m in validate(crystal) if "simplex" in m]
        assert msgs == []
        assert meta["steps"] == 10

    def test_angle_clamp_reported(self):
        state = FlowState(np.array([4.0, 4.0, 4.0, 9.0, 0.0, 0.0]),
                          np.zeros((1, 2, 3)), np.full((1, 5), 0.2),
                          np.array([[1.0, 0.0]]))
        crystal, meta = finalize(state, SamplerConfig(steps=1, task="dng"),
                                 element_vocab=(8, 22, 26, 38, 56))
        assert meta["angles_clamped"] == 1
        assert crystal.lattice.alpha == 120.0

    def test_negative_length_aborts(self):
        state = FlowState(np.array([-1.0, 4.0, 4.0, 0.0, 0.0, 0.0]),
                          np.zeros((1, 2, 3)), np.full((1, 5), 0.2),
                          np.array([[1.0, 0.0]]))
        with pytest.raises(RuntimeError, match="cell lengths"):
            finalize(state, SamplerConfig(steps=1, task="dng"))


@pytest.fixture(scope="module")
def trained():
    crystals = make_toy_dataset(default_toy_template(), 16, 0.01,
                                np.random.default_rng(0)).crystals
    cfg = TrainingConfig(task="dng", epochs=2, batch_size=8, hidden_dim=16,
                         num_layers=1, n_freq=4, n_max=8, seed=0)
    return train(crystals, cfg)


class TestBatchSampling:
    def test_reproducible_under_seed(self, trained):
        sampler = EmpiricalSizeSampler(trained.size_counts)
        cfg = SamplerConfig(steps=8, slope=20.0, task="dng", seed=123)
        a = sample_batch(trained.net, sampler, cfg, n_samples=5,
                         length_prior=trained.length_prior)
        b = sample_batch(trained.net, sampler, cfg, n_samples=5,
                         length_prior=trained.length_prior)
        for (ca, _), (cb, _) in zip(a, b):
            assert np.array_equal(ca.positions_tensor(), cb.positions_tensor())
            assert np.array_equal(ca.species_matrix(), cb.species_matrix())
            assert ca.lattice == cb.lattice

    def test_size_histogram_tv_distance(self, rng):
        counts = {4: 700, 7: 200, 12: 100}
        sampler = EmpiricalSizeSampler(counts)
        draws = np.array([sampler.draw(rng) for _ in range(10000)])
        emp = {n: float(np.mean(draws == n)) for n in counts}
        ref = {n: c / 1000.0 for n, c in counts.items()}
        tv = 0.5 * sum(abs(emp[n] - ref[n]) for n in counts)
        assert tv < 0.05

    def test_csp_batch_one_per_condition(self, trained, rng):
        refs = make_toy_dataset(default_toy_template(), 3, 0.01, rng).crystals
        cfg = SamplerConfig(steps=8, slope=20.0, task="csp", seed=7)
        out = sample_csp_batch(trained.net, refs, cfg,
                               length_prior=trained.length_prior)
        assert len(out) == 3
        for (crystal, _), ref in zip(out, refs):
            assert np.array_equal(crystal.species_matrix(), ref.species_matrix())
            assert np.array_equal(crystal.weights_matrix(), ref.weights_matrix())

    def test_single_chain_sample(self, trained):
        cfg = SamplerConfig(steps=8, slope=20.0, task="dng", seed=3)
        crystal, meta = sample(model_velocity_fn(trained.net), 4, cfg,
                               d_elements=100, l_max=2,
                               length_prior=trained.length_prior)
        assert crystal.n_sites == 4
        assert meta["task"] == "dng"
