import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bucketline import framecodec as fc
from bucketline import modem
from bucketline.channel import CableModel, propagate
from bucketline.framecodec import Address, CodecConfig, MeasurementData, Mpdu
from bucketline.modem import OfdmConfig

from oracles import qam_grid

CFG = OfdmConfig()


def _psdu(seed=0):
    rng = np.random.default_rng(seed)
    m = Mpdu(MeasurementData(int(rng.integers(0, 1 << 27)), int(rng.integers(0, 1024))),
             Address(1, int(rng.integers(1, 1000))), Address(1, 0),
             Address(1, 3), Address(1, 4), int(rng.integers(0, 1 << 32)))
    return fc.serialize_mpdu(m)


def _stream(burst, lead=0, tail=400):
    return np.concatenate([np.zeros(lead, complex), burst.samples, np.zeros(tail, complex)])


# ---------------------------------------------------------------------------
# configuration arithmetic

def test_default_numerology():
    assert CFG.sample_rate == pytest.approx(12.5e6, rel=1e-15)
    assert CFG.symbol_s == pytest.approx(20.48e-6, rel=1e-12)
    assert CFG.extended_symbol_s == pytest.approx(25.6e-6, rel=1e-12)
    assert CFG.symbols_per_bucket == 13
    assert CFG.bucket_samples == 4160
    assert CFG.bucket_duration_s == pytest.approx(0.3328e-3, rel=1e-12)
    assert CFG.capacity_bits == 848


def test_config_rejects_overfull_carriers():
    with pytest.raises(ValueError):
        OfdmConfig(data_carriers=220, pilot_carriers=44)
    with pytest.raises(modem.UnsupportedOrder):
        OfdmConfig(qam_order=8)


# ---------------------------------------------------------------------------
# QAM

def test_bpsk_phases():
    assert np.allclose(modem.qam_map([0, 1], 2), [1, -1])


def test_16qam_zero_label_corner():
    assert modem.qam_map([0, 0, 0, 0], 16)[0] == pytest.approx((-3 - 3j) / math.sqrt(10), abs=1e-15)


@pytest.mark.parametrize("M", [4, 16, 64])
def test_constellation_is_the_indexed_grid(M):
    grid, e_avg = qam_grid(M)
    pts = modem.qam_constellation(M)
    key = lambda z: (round(z.real, 9), round(z.imag, 9))
    assert sorted(map(key, pts)) == sorted(map(key, grid))
    assert np.mean(np.abs(pts) ** 2) == pytest.approx(1.0, abs=1e-12)
    assert e_avg == pytest.approx({4: 2, 16: 10, 64: 42}[M])


@pytest.mark.parametrize("M", [4, 16, 64])
def test_gray_neighbors_differ_in_one_bit(M):
    pts = modem.qam_constellation(M)
    dmin = min(abs(a - b) for i, a in enumerate(pts) for b in pts[i + 1:])
    for i, a in enumerate(pts):
        for j, b in enumerate(pts):
            if i < j and abs(abs(a - b) - dmin) < 1e-9:
                assert bin(i ^ j).count("1") == 1


@settings(max_examples=100)
@given(st.sampled_from([2, 4, 16, 64]), st.integers(0, 2 ** 32 - 1))
def test_demap_inverts_map(M, seed):
    n = int(math.log2(M))
    bits = np.random.default_rng(seed).integers(0, 2, 12 * n)
    assert np.array_equal(modem.qam_demap(modem.qam_map(bits, M), M), bits)


def test_demap_under_half_min_distance():
    rng = np.random.default_rng(1)
    bits = rng.integers(0, 2, 4 * 2000)
    pts = modem.qam_map(bits, 16)
    r = 0.999 / math.sqrt(10)            # d_min / 2 for unit-energy 16-QAM
    # worst case is along an axis; a radius below d_min/2 in every direction never crosses
    noise = r * np.exp(2j * np.pi * rng.random(pts.size)) * rng.random(pts.size)
    assert np.array_equal(modem.qam_demap(pts + noise, 16), bits)


def test_demap_tie_goes_to_lower_gray_label():
    pts = modem.qam_constellation(16)
    a, b = pts[0], pts[1]                 # labels 0000 and 0001 differ on the Q axis only
    mid = (a + b) / 2
    assert modem.qam_demap([mid], 16).tolist() == [0, 0, 0, 0]


def test_map_rejects_partial_symbol():
    with pytest.raises(modem.BadLength):
        modem.qam_map([0, 1, 1], 16)


# ---------------------------------------------------------------------------
# OFDM symbol properties

def test_parseval():
    rng = np.random.default_rng(2)
    freq = modem.qam_map(rng.integers(0, 2, 4 * 256), 16)
    body = modem.ofdm_symbol(freq)
    # with the 1/N inverse transform: sum |b|^2 = (1/N) sum |d|^2
    assert np.sum(np.abs(body) ** 2) == pytest.approx(np.sum(np.abs(freq) ** 2) / 256, rel=1e-9)


def test_single_carrier_orthogonality():
    for k in (0, 5, 128, 255):
        freq = np.zeros(256, complex)
        freq[k] = 1
        spec = np.fft.fft(modem.ofdm_symbol(freq))
        mask = np.ones(256, bool)
        mask[k] = False
        assert np.max(np.abs(spec[mask])) < 1e-9
        assert spec[k] == pytest.approx(1)


def test_cyclic_prefix_identity():
    burst = modem.modulate_bucket(_psdu())
    x = burst.samples
    L, N, cp = CFG.ext_len, CFG.fft_size, CFG.cp_len
    for s in range(CFG.symbols_per_bucket):
        sym = x[s * L:(s + 1) * L]
        head, tail = sym[:cp], sym[N:]
        assert np.array_equal(head, tail)
        rho = abs(np.vdot(head, tail)) / math.sqrt(np.vdot(head, head).real * np.vdot(tail, tail).real)
        assert rho == pytest.approx(1.0, abs=1e-12)


def test_burst_layout():
    burst = modem.modulate_bucket(_psdu(), tx_power_dbm=10.0)
    x = burst.samples
    L = CFG.ext_len
    assert x.size == 4160
    assert burst.duration_s == pytest.approx(0.3328e-3)
    syms = x.reshape(13, L)
    for i in range(1, 8):
        assert np.allclose(syms[i], syms[0])
    assert np.allclose(syms[8], -syms[0]) and np.allclose(syms[9], -syms[0])
    assert np.array_equal(syms[10], syms[11]) and np.array_equal(syms[11], syms[12])
    assert np.mean(np.abs(syms[10]) ** 2) == pytest.approx(10.0, rel=0.1)   # mW


def test_tx_power_scaling():
    lo = modem.modulate_bucket(_psdu(), tx_power_dbm=0.0).samples
    hi = modem.modulate_bucket(_psdu(), tx_power_dbm=10.0).samples
    assert np.allclose(hi, lo * math.sqrt(10))


def test_coded_payload_fills_212_carriers():
    psdu = _psdu()
    bits = fc.bytes_to_bits(psdu + modem.frame_control(psdu))
    assert bits.size == 424
    assert fc.fec_encode(bits).size == 848 == 212 * 4


def test_frame_control_layout():
    psdu = _psdu()
    fcb = modem.frame_control(psdu)
    assert len(fcb) == 22
    assert fcb[0] == modem.FC_VERSION and fcb[1] == psdu[0] >> 6
    assert fcb[6:] == bytes(16)
    assert int.from_bytes(fcb[2:6], "big") == fc.crc32(fcb[:2] + bytes(16))


def test_overflow_when_capacity_too_small():
    with pytest.raises(modem.Overflow):
        modem.modulate_bucket(_psdu(), OfdmConfig(qam_order=4))


def test_psdu_length_checked():
    with pytest.raises(modem.BadLength):
        modem.modulate_bucket(bytes(30))


# ---------------------------------------------------------------------------
# receiver

def test_loopback_identity_channel():
    psdu = _psdu(3)
    got, stats, off = modem.receive(_stream(modem.modulate_bucket(psdu)))
    assert got == psdu and off == 0
    assert stats.evm < 1e-9
    assert stats.replica_crc_ok == (True, True, True)


def test_detect_offset_777():
    burst = modem.modulate_bucket(_psdu())
    off = modem.detect_burst(_stream(burst, lead=777))
    assert off is not None and abs(off - 777) <= 1


def test_detect_no_burst_in_noise():
    rng = np.random.default_rng(9)
    cable = CableModel()
    hits = 0
    for _ in range(200):
        noise, _ = propagate(np.zeros(1, complex), cable, 0.0, rng, tx_power_dbm=10.0, pad=2 * 4160)
        hits += modem.detect_burst(noise) is not None
    assert hits == 0


def test_detect_at_0db_snr():
    rng = np.random.default_rng(10)
    burst = modem.modulate_bucket(_psdu(), tx_power_dbm=10.0)
    cable = CableModel(tx_snr_db=0.0)            # noise floor equal to the burst power
    ok = 0
    trials = 200
    for _ in range(trials):
        lead = int(rng.integers(0, 500))
        rx, budget = propagate(np.concatenate([np.zeros(lead, complex), burst.samples]),
                               cable, 0.0, rng, tx_power_dbm=10.0, pad=300)
        assert budget.snr_db == pytest.approx(0.0)
        off = modem.detect_burst(rx)
        ok += off is not None and abs(off - lead) <= 1
    assert ok / trials >= 0.99


def test_fir_channel_inside_cp():
    psdu = _psdu(4)
    cable = CableModel(fir_taps=(1.0,) + (0,) * 7 + (0.3,), tx_snr_db=None)
    rx, _ = propagate(modem.modulate_bucket(psdu), cable, 0.0, pad=200)
    got, stats, _ = modem.receive(rx)
    assert got == psdu
    # pilots are exact; linear interpolation between them leaves a small residual
    assert stats.evm < 0.1


def test_pilot_estimate_exact_for_fir_up_to_cp():
    rng = np.random.default_rng(12)
    taps = rng.normal(size=64) + 1j * rng.normal(size=64)
    cable = CableModel(fir_taps=tuple(taps), tx_snr_db=None)
    tx = modem.modulate_bucket(_psdu(5)).samples
    rx, _ = propagate(tx, cable, 0.0, pad=200)
    pilot_idx = modem._layout(CFG)[0]
    L, N, cp = CFG.ext_len, CFG.fft_size, CFG.cp_len
    s = 10 * L + cp                       # body of the first payload symbol
    H = np.fft.fft(rx[s:s + N])[pilot_idx] / np.fft.fft(tx[s:s + N])[pilot_idx]
    assert np.allclose(H, np.fft.fft(taps, N)[pilot_idx], rtol=1e-9, atol=1e-9)


def test_short_multipath_decodes():
    cable = CableModel(fir_taps=(1.0, 0.4j, -0.2), tx_snr_db=None)
    psdu = _psdu(5)
    rx, _ = propagate(modem.modulate_bucket(psdu), cable, 0.0, pad=200)
    got, _ = modem.demodulate_bucket(rx, 0)
    assert got == psdu


def test_majority_vote_rescues_corrupted_replica():
    psdu = _psdu(6)
    x = _stream(modem.modulate_bucket(psdu)).copy()
    L, N, cp = CFG.ext_len, CFG.fft_size, CFG.cp_len
    s = 10 * L                                   # first payload symbol
    x[s:s + L] = np.random.default_rng(0).normal(size=L) * 5
    got, stats = modem.demodulate_bucket(x, 0)
    assert got == psdu
    assert stats.replica_crc_ok[0] is False
    assert stats.replica_crc_ok[1:] == (True, True)


def test_all_replicas_bad_raises():
    x = _stream(modem.modulate_bucket(_psdu())).copy()
    L = CFG.ext_len
    x[10 * L:13 * L] = np.random.default_rng(1).normal(size=3 * L) * 5
    with pytest.raises(modem.DemodFailed):
        modem.demodulate_bucket(x, 0)


def test_receive_without_burst():
    with pytest.raises(modem.DemodFailed):
        modem.receive(np.zeros(6000, complex))


def test_burst_dump_round_trip(tmp_path):
    burst = modem.modulate_bucket(_psdu(), tx_power_dbm=3.0)
    p = tmp_path / "b.iq"
    modem.write_burst(p, burst)
    back = modem.read_burst(p)
    assert np.array_equal(back.samples, burst.samples)
    assert back.tx_power_dbm == 3.0 and back.sample_rate == CFG.sample_rate
    assert p.stat().st_size == 16 * 4160
    assert "cp = 64" in (tmp_path / "b.iq.txt").read_text()


def test_custom_scrambler_seed_must_match():
    psdu = _psdu(7)
    codec = CodecConfig(scrambler_seed=0x155)
    burst = modem.modulate_bucket(psdu, codec=codec)
    got, _ = modem.demodulate_bucket(_stream(burst), 0, codec=codec)
    assert got == psdu
    with pytest.raises(modem.DemodFailed):
        modem.demodulate_bucket(_stream(burst), 0)
