#!/usr/bin/env python3
# SPDX-License-Identifier: Apache-2.0
"""Writes STOI reference fixtures: WAV pairs plus pystoi scores.

Usage: python3 scripts/stoi_fixtures.py crates/core/tests/fixtures/stoi
"""
import json
import sys
from pathlib import Path

import numpy as np
from pystoi import stoi
from scipy.io import wavfile
from scipy.signal import lfilter

FS = 16000


def speech_like(n, rng):
    out = np.zeros(n)
    pos = int(rng.uniform(0.02, 0.1) * FS)
    t = np.arange(n) / FS
    while pos < n:
        end = min(pos + int(rng.uniform(0.12, 0.3) * FS), n)
        env = np.sin(np.pi * np.arange(end - pos) / (end - pos)) ** 0.6
        f0 = rng.uniform(90, 220)
        formants = [rng.uniform(300, 800), rng.uniform(900, 2200), rng.uniform(2400, 3000)]
        burst = np.zeros(end - pos)
        for h in range(1, int(4000 / f0)):
            g = sum(np.exp(-0.5 * ((h * f0 - fc) / 120) ** 2) for fc in formants) + 0.02
            burst += g / np.sqrt(h) * np.sin(2 * np.pi * h * f0 * t[pos:end] + rng.uniform(0, 2 * np.pi))
        out[pos:end] += rng.uniform(0.3, 1.0) * env * burst
        pos = end + int(rng.uniform(0.03, 0.15) * FS)
    return 0.1 * out / np.sqrt(np.mean(out**2))


def mix(s, noise, snr_db):
    g = np.sqrt(np.mean(s**2) / np.mean(noise**2) * 10 ** (-snr_db / 10))
    return s + g * noise


def main(out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(20240611)
    cases = [
        ("white", 20), ("white", 5), ("white", 0), ("white", -5), ("pink", 10),
        ("pink", 0), ("pink", -10), ("lowpass", None), ("white", -10), ("independent", None),
    ]
    expected = {}
    for i, (kind, snr) in enumerate(cases):
        s = speech_like(int(2.5 * FS), rng)
        w = rng.standard_normal(s.size)
        if kind == "white":
            y = mix(s, w, snr)
        elif kind == "pink":
            y = mix(s, lfilter([0.049922035, -0.095993537, 0.050612699, -0.004408786],
                               [1, -2.494956002, 2.017265875, -0.522189400], w), snr)
        elif kind == "lowpass":
            y = lfilter([0.2] * 5, [1.0], s)
        else:
            y = 0.1 * w
        name = f"pair{i:02}"
        peak = max(np.abs(s).max(), np.abs(y).max()) / 0.9
        xq = np.round(s / peak * 32767).astype(np.int16)
        yq = np.round(y / peak * 32767).astype(np.int16)
        wavfile.write(out / f"{name}_clean.wav", FS, xq)
        wavfile.write(out / f"{name}_degraded.wav", FS, yq)
        score = stoi(xq / 32768.0, yq / 32768.0, FS)
        expected[name] = {"kind": kind, "snr_db": snr, "stoi": float(score)}
    (out / "expected.json").write_text(json.dumps(expected, indent=2) + "\n")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "crates/core/tests/fixtures/stoi")
