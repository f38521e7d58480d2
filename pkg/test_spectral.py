#!/usr/bin/env python3
"""
Tests for the channel-wise spectral filter, cross-task consensus and the
pyramid decoder pieces.
"""

import numpy as np
import pytest

from conftest import conjugate_symmetric
from config import BackboneSpec, ConfigError, DecoderConfig, TaskSpec
from gradcheck import check_gradients
from spectral import (
    SpectralFilterState, SpectralResidueError, XtConsState, band_masks,
    cwsp_forward, decode, init_fuse, init_head, init_task_decoder, pyramid_fuse,
    spectral_consensus, task_head
)
from tensor import DimensionError, Tensor, mul, sum_


def random_filter(rng, c, h, w):
    return SpectralFilterState(
        weight=Tensor(conjugate_symmetric(rng.normal(1.0, 0.5, size=(c, h, w))), requires_grad=True),
        alpha=Tensor(rng.uniform(0.5, 1.5, size=c), requires_grad=True),
        beta=Tensor(rng.normal(size=c), requires_grad=True),
    )


def weighted_sum(out, seed=1):
    return sum_(mul(out, Tensor(np.random.default_rng(seed).normal(size=out.shape))))


def test_identity_filter_reproduces_input():
    rng = np.random.default_rng(0)
    for shape in [(2, 3, 4, 4), (1, 5, 8, 6), (3, 2, 16, 16)]:
        x = Tensor(rng.normal(size=shape))
        out = cwsp_forward(x, SpectralFilterState.identity(*shape[1:]))
        np.testing.assert_allclose(out.data, x.data, atol=1e-9)


def test_symmetric_filter_output_is_real_to_tolerance():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(2, 3, 6, 5)))
    cwsp_forward(x, random_filter(rng, 3, 6, 5), imag_tol=1e-9)


def test_asymmetric_filter_trips_residue_check():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(1, 2, 4, 4)))
    f = SpectralFilterState.identity(2, 4, 4)
    f.weight.data[...] = rng.normal(size=(2, 4, 4))
    with pytest.raises(SpectralResidueError):
        cwsp_forward(x, f, imag_tol=1e-9)
    cwsp_forward(x, f, imag_tol=None)


def test_filter_shape_mismatch():
    with pytest.raises(DimensionError):
        cwsp_forward(Tensor(np.ones((1, 2, 4, 4))), SpectralFilterState.identity(3, 4, 4))


@pytest.mark.parametrize('seed', range(20))
def test_cwsp_gradients(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
    f = random_filter(rng, 3, 4, 4)
    params = {'x': x, 'weight': f.weight, 'alpha': f.alpha, 'beta': f.beta}
    errors = check_gradients(lambda: weighted_sum(cwsp_forward(x, f, imag_tol=None)), params)
    assert max(errors.values()) < 1e-4, errors


def test_band_masks_partition():
    rng = np.random.default_rng(3)
    for _ in range(100):
        spectrum = np.fft.fft2(rng.normal(size=(2, 3, 4, 4)))
        tau = float(rng.uniform(0.05, 0.95))
        low, high = band_masks(spectrum, tau)
        assert np.all(low ^ high)
        peak = np.abs(spectrum).max(axis=(-2, -1), keepdims=True)
        np.testing.assert_array_equal(high, np.abs(spectrum) / peak > tau)


def test_band_masks_zero_channel_is_all_low():
    spectrum = np.zeros((1, 2, 4, 4), dtype=np.complex128)
    spectrum[0, 1, 0, 0] = 3.0
    low, high = band_masks(spectrum, 0.5)
    assert low[0, 0].all()
    assert high[0, 1, 0, 0] and high.sum() == 1


def test_consensus_fixed_point_and_no_op():
    rng = np.random.default_rng(4)
    for _ in range(100):
        main = Tensor(rng.normal(size=(2, 3, 4, 4)))
        aux = [Tensor(main.data.copy()), Tensor(main.data.copy())]
        st = XtConsState.initial(tau=float(rng.uniform(0.1, 0.9)))
        st.alpha_low.data[...] = rng.normal()
        st.alpha_high.data[...] = rng.normal()
        np.testing.assert_allclose(spectral_consensus(main, aux, st).data, main.data, atol=1e-9)

        others = [Tensor(rng.normal(size=main.shape)) for _ in range(2)]
        idle = XtConsState.initial()
        np.testing.assert_array_equal(spectral_consensus(main, others, idle).data, main.data)


def test_consensus_full_step_reaches_average():
    rng = np.random.default_rng(5)
    for swap in (False, True):
        main = Tensor(rng.normal(size=(1, 2, 4, 4)))
        aux = [Tensor(rng.normal(size=main.shape)) for _ in range(3)]
        st = XtConsState.initial(swap_bands=swap)
        st.alpha_low.data[...] = 1.0
        st.alpha_high.data[...] = 1.0
        average = np.mean([a.data for a in aux], axis=0)
        np.testing.assert_allclose(spectral_consensus(main, aux, st).data, average, atol=1e-9)


def test_consensus_band_paths_are_separate():
    rng = np.random.default_rng(6)
    main = Tensor(rng.normal(size=(1, 2, 4, 4)))
    aux = [Tensor(rng.normal(size=main.shape))]
    only_low, only_high = XtConsState.initial(), XtConsState.initial()
    only_low.alpha_low.data[...] = 1.0
    only_high.alpha_high.data[...] = 1.0
    low_step = spectral_consensus(main, aux, only_low).data - main.data
    high_step = spectral_consensus(main, aux, only_high).data - main.data
    np.testing.assert_allclose(low_step + high_step, aux[0].data - main.data, atol=1e-9)
    swapped = XtConsState.initial(swap_bands=True)
    swapped.alpha_low.data[...] = 1.0
    np.testing.assert_allclose(spectral_consensus(main, aux, swapped).data - main.data, high_step, atol=1e-12)


def test_consensus_requires_auxiliary_features():
    main = Tensor(np.ones((1, 1, 2, 2)))
    with pytest.raises(DimensionError):
        spectral_consensus(main, [], XtConsState.initial())
    with pytest.raises(DimensionError):
        spectral_consensus(main, [Tensor(np.ones((1, 1, 2, 3)))], XtConsState.initial())


@pytest.mark.parametrize('seed', range(20))
def test_consensus_gradients_for_aux_and_steps(seed):
    rng = np.random.default_rng(seed)
    main = Tensor(rng.normal(size=(2, 3, 4, 4)))
    aux = [Tensor(rng.normal(size=main.shape), requires_grad=True) for _ in range(2)]
    st = XtConsState.initial()
    st.alpha_low.data[...] = rng.normal()
    st.alpha_high.data[...] = rng.normal()
    params = {'aux0': aux[0], 'aux1': aux[1], 'alpha_low': st.alpha_low, 'alpha_high': st.alpha_high}
    errors = check_gradients(lambda: weighted_sum(spectral_consensus(main, aux, st, imag_tol=None)), params)
    assert max(errors.values()) < 1e-4, errors


@pytest.mark.parametrize('seed', range(20))
def test_consensus_gradients_for_main(seed):
    # Equal step sizes make the output independent of where the band split falls
    rng = np.random.default_rng(seed)
    main = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
    aux = [Tensor(rng.normal(size=main.shape))]
    st = XtConsState.initial()
    step = rng.uniform(0.2, 0.8)
    st.alpha_low.data[...] = step
    st.alpha_high.data[...] = step
    errors = check_gradients(lambda: weighted_sum(spectral_consensus(main, aux, st, imag_tol=None)), {'main': main})
    assert errors['main'] < 1e-4, errors


def test_pyramid_fuse_shapes_and_gradients():
    rng = np.random.default_rng(7)
    feats = [Tensor(rng.normal(size=(2, 4, 4, 4)), requires_grad=True),
             Tensor(rng.normal(size=(2, 8, 2, 2)), requires_grad=True)]
    fuse = init_fuse([4, 8], 5, rng)
    out = pyramid_fuse(feats, fuse)
    assert out.shape == (2, 5, 4, 4)
    params = {'f0': feats[0], 'f1': feats[1], 'proj0': fuse.projections[0], 'conv': fuse.conv}
    errors = check_gradients(lambda: weighted_sum(pyramid_fuse(feats, fuse)), params)
    assert max(errors.values()) < 1e-4, errors
    with pytest.raises(DimensionError):
        pyramid_fuse(feats[:1], fuse)


def test_task_head_outputs():
    rng = np.random.default_rng(8)
    fused = Tensor(rng.normal(size=(2, 5, 4, 4)))
    seg = TaskSpec(name='seg', kind='segmentation', num_classes=3)
    depth = TaskSpec(name='depth', kind='regression_l1')
    assert task_head(fused, seg, init_head(5, seg, rng), patch_size=2).shape == (2, 3, 8, 8)
    assert task_head(fused, depth, init_head(5, depth, rng), patch_size=2).shape == (2, 1, 8, 8)
    bogus = TaskSpec(name='x', kind='regression_l1')
    bogus.kind = 'normals'
    with pytest.raises(ConfigError):
        task_head(fused, bogus, init_head(5, depth, rng))


def test_decode_identity_filters_match_plain_fusion():
    spec = BackboneSpec(stages=2, blocks_per_stage=1, base_channels=4, patch_size=2, input_size=(8, 8))
    tasks = [TaskSpec(name='a', kind='regression_l1'), TaskSpec(name='b', kind='balanced_binary')]
    rng = np.random.default_rng(9)
    features = {
        t.name: [Tensor(rng.normal(size=(2, 4, 4, 4))), Tensor(rng.normal(size=(2, 8, 2, 2)))] for t in tasks
    }
    on = DecoderConfig(tspd=True, xtcons=True)
    off = DecoderConfig(tspd=False, xtcons=False)
    decoders_on = {t.name: init_task_decoder(spec, t, on, np.random.default_rng(1)) for t in tasks}
    decoders_off = {t.name: init_task_decoder(spec, t, off, np.random.default_rng(1)) for t in tasks}
    out_on = decode(features, decoders_on, on, spec.patch_size)
    out_off = decode(features, decoders_off, off, spec.patch_size)
    for t in tasks:
        assert out_on[t.name].shape == (2, 1, 8, 8)
        np.testing.assert_allclose(out_on[t.name].data, out_off[t.name].data, atol=1e-9)


def test_decoder_parameters_follow_switches():
    spec = BackboneSpec(stages=2, blocks_per_stage=1, base_channels=4, patch_size=2, input_size=(8, 8))
    task = TaskSpec(name='a', kind='regression_l1')
    dec = init_task_decoder(spec, task, DecoderConfig(), np.random.default_rng(0))
    full = dec.parameters(tspd=True, xtcons=True)
    assert 'decoder.a.s1.filter' in full and 'decoder.a.s0.alpha_low' in full
    bare = dec.parameters(tspd=False, xtcons=False)
    assert not [k for k in bare if '.filter' in k or 'alpha' in k or k.endswith('.beta')]
    assert 'decoder.a.head.weight' in bare



def naive_dft2(x):
    h, w = x.shape
    ky, kx = np.meshgrid(np.arange(h), np.arange(w), indexing='ij')
    out = np.zeros((h, w), dtype=np.complex128)
    for y in range(h):
        for x_ in range(w):
            out += x[y, x_] * np.exp(-2j * np.pi * (ky * y / h + kx * x_ / w))
    return out


def test_low_band_step_replaces_low_bins_with_average():
    rng = np.random.default_rng(10)
    main = Tensor(rng.normal(size=(1, 2, 4, 4)))
    aux = [Tensor(rng.normal(size=main.shape)) for _ in range(2)]
    st = XtConsState.initial(tau=0.4)
    st.alpha_low.data[...] = 1.0
    out = spectral_consensus(main, aux, st)
    for c in range(2):
        f_main = naive_dft2(main.data[0, c])
        f_avg = (naive_dft2(aux[0].data[0, c]) + naive_dft2(aux[1].data[0, c])) / 2.0
        low = np.abs(f_main) / np.abs(f_main).max() <= 0.4
        expected = np.where(low, f_avg, f_main)
        np.testing.assert_allclose(naive_dft2(out.data[0, c]), expected, atol=1e-9)


def test_zero_filter_leaves_only_the_shift():
    rng = np.random.default_rng(31)
    x = Tensor(rng.normal(size=(2, 2, 4, 6)))
    f = SpectralFilterState.identity(2, 4, 6)
    f.weight.data[...] = 0.0
    f.beta.data[...] = [0.3, -1.2]
    out = cwsp_forward(x, f)
    np.testing.assert_array_equal(out.data[:, 0], np.full((2, 4, 6), 0.3))
    np.testing.assert_array_equal(out.data[:, 1], np.full((2, 4, 6), -1.2))


def test_dc_only_filter_gives_spatial_mean():
    rng = np.random.default_rng(32)
    x = Tensor(rng.normal(size=(3, 4, 8, 6)))
    f = SpectralFilterState.identity(4, 8, 6)
    f.weight.data[...] = 0.0
    f.weight.data[:, 0, 0] = 1.0
    out = cwsp_forward(x, f)
    expected = np.broadcast_to(x.data.mean(axis=(-2, -1), keepdims=True), x.shape)
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


if __name__ == '__main__':
    raise SystemExit(pytest.main([__file__, '-q']))
