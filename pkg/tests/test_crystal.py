import numpy as np
import pytest

from dcflow.crystal import (DisorderedCrystal, Site, from_ordered, make_crystal,
                            make_lattice, make_site, pad_to_order,
                            sample_realization, validate, expected_composition)


def one_hot(k, d=100):
    v = np.zeros(d)
    v[k] = 1.0
    return v


class TestValidate:
    def test_ordered_nacl_clean(self, nacl):
        assert validate(nacl) == []

    def test_bad_simplex_sum_flagged(self, nacl):
        bad = Site(s=one_hot(10) * 0.9, positions=nacl.sites[0].positions,
                   pos_weights=nacl.sites[0].pos_weights)
        crystal = DisorderedCrystal(nacl.lattice, (bad, nacl.sites[1]))
        msgs = validate(crystal)
        assert len(msgs) == 1 and "simplex sum" in msgs[0] and "site 0" in msgs[0]

    def test_coordinate_range_flagged(self, nacl):
        bad_pos = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
        bad = Site(s=one_hot(10), positions=bad_pos,
                   pos_weights=np.array([1.0, 0.0]))
        crystal = DisorderedCrystal(nacl.lattice, (bad, nacl.sites[1]))
        msgs = validate(crystal)
        assert len(msgs) == 1 and "coordinate range" in msgs[0]

    def test_zero_weight_padding_flagged(self, nacl):
        bad = Site(s=one_hot(10), positions=np.array([[0.1, 0.1, 0.1], [0.2, 0.2, 0.2]]),
                   pos_weights=np.array([1.0, 0.0]))
        crystal = DisorderedCrystal(nacl.lattice, (bad, nacl.sites[1]))
        assert any("zero-padded" in m for m in validate(crystal))


class TestFromOrdered:
    def test_single_site(self):
        c = from_ordered([26], [(0.0, 0.0, 0.0)], make_lattice(3, 3, 3, 90, 90, 90))
        assert validate(c) == []
        assert c.sites[0].s[25] == 1.0 and c.sites[0].s.sum() == 1.0
        assert np.array_equal(c.sites[0].pos_weights, [1.0, 0.0])

    def test_two_site_basis(self):
        c = from_ordered([11, 17], [(0, 0, 0), (0.5, 0.5, 0.5)],
                         make_lattice(5.6, 5.6, 5.6, 90, 90, 90))
        assert all(np.count_nonzero(site.s) == 1 for site in c.sites)
        assert validate(c) == []

    def test_unknown_element(self):
        with pytest.raises(ValueError, match="vocabulary"):
            from_ordered([101], [(0, 0, 0)], make_lattice(3, 3, 3, 90, 90, 90))

    def test_wrap_at_construction(self):
        c = from_ordered([26], [(1.25, -0.25, 0.5)], make_lattice(3, 3, 3, 90, 90, 90))
        assert np.allclose(c.sites[0].positions[0], [0.25, 0.75, 0.5])


class TestPadToOrder:
    def test_pad_binary_to_five(self, tiny_crystal):
        padded = pad_to_order(tiny_crystal, 5)
        assert padded.l_max == 5
        assert validate(padded) == []
        site = padded.sites[2]
        assert np.array_equal(site.pos_weights[2:], np.zeros(3))
        assert np.array_equal(site.positions[2:], np.zeros((3, 3)))

    def test_identity(self, tiny_crystal):
        assert pad_to_order(tiny_crystal, 2) is tiny_crystal

    def test_safe_shrink(self, tiny_crystal):
        padded = pad_to_order(tiny_crystal, 5)
        back = pad_to_order(padded, 2)
        for a, b in zip(back.sites, tiny_crystal.sites):
            assert np.array_equal(a.positions, b.positions)
            assert np.array_equal(a.pos_weights, b.pos_weights)

    def test_shrink_through_weight_fails(self, tiny_crystal):
        with pytest.raises(ValueError, match="nonzero weight"):
            pad_to_order(tiny_crystal, 1)  # site 2 carries weight on channel 1


class TestSampleRealization:
    def test_ordered_fixed_point(self, nacl, rng):
        real = sample_realization(nacl, rng)
        for a, b in zip(real.sites, nacl.sites):
            assert np.array_equal(a.s, b.s)
            assert np.array_equal(a.positions[0], b.positions[0])

    def test_sd_marginal(self, rng):
        s = np.zeros(100)
        s[25] = 0.5  # Fe
        s[27] = 0.5  # Ni
        site = make_site(s, [(0.1, 0.1, 0.1), (0, 0, 0)], [1.0, 0.0])
        crystal = make_crystal(make_lattice(4, 4, 4, 90, 90, 90), [site])
        hits = sum(sample_realization(crystal, rng).sites[0].s[25] == 1.0
                   for _ in range(10000))
        assert abs(hits / 10000 - 0.5) < 0.02

    def test_pd_marginal(self, rng):
        site = make_site(one_hot(25), [(0.2, 0.2, 0.2), (0.8, 0.8, 0.8)], [0.7, 0.3])
        crystal = make_crystal(make_lattice(4, 4, 4, 90, 90, 90), [site])
        hits = sum(np.allclose(sample_realization(crystal, rng).sites[0].positions[0],
                               [0.2, 0.2, 0.2]) for _ in range(10000))
        assert abs(hits / 10000 - 0.7) < 0.02

    def test_output_is_ordered(self, tiny_crystal, rng):
        real = sample_realization(tiny_crystal, rng)
        assert validate(real) == []
        for site in real.sites:
            assert np.count_nonzero(site.s) == 1
            assert np.array_equal(site.pos_weights, [1.0, 0.0])


class TestFactories:
    def test_renormalization_window(self):
        s = one_hot(5) * (1 + 5e-7)
        site = make_site(s, [(0, 0, 0), (0, 0, 0)], [1.0, 0.0])
        assert site.s.sum() == pytest.approx(1.0, abs=1e-15)

    def test_renormalization_rejects_faroff(self):
        with pytest.raises(ValueError, match="sums to"):
            make_site(one_hot(5) * 0.9, [(0, 0, 0), (0, 0, 0)], [1.0, 0.0])

    def test_lattice_angle_range(self):
        with pytest.raises(ValueError, match="angles"):
            make_lattice(3, 3, 3, 59.0, 90, 90)

    def test_site_count_bounds(self, nacl):
        with pytest.raises(ValueError, match="site count"):
            make_crystal(nacl.lattice, list(nacl.sites) * 100, n_max=160)

    def test_immutability(self, nacl):
        with pytest.raises(ValueError):
            nacl.sites[0].s[0] = 0.5

    def test_expected_composition(self, tiny_crystal):
        comp = expected_composition(tiny_crystal)
        assert comp[38] == pytest.approx(0.5)   # half of the mixed site 0
        assert comp[8] == pytest.approx(1.5)    # site 2 plus half of site 0
        assert sum(comp.values()) == pytest.approx(4.0)
