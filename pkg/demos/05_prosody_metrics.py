"""Pitch and duration error on controlled signals.

A 220 Hz tone against a 230 Hz tone should give MSEP near 100 Hz^2; a
glide shows the per-frame F0 track the metric is built on.
"""
import numpy as np

from diffspeech.evalsuite import extract_f0, msed, msep
from diffspeech.features import Waveform

SR = 24000
t = np.arange(SR) / SR
tone = lambda f: Waveform(0.5 * np.sin(2 * np.pi * f * t), SR)

print(f"MSEP(220 Hz, 230 Hz) = {msep(tone(220), tone(230)):.2f} Hz^2")
print(f"MSEP(220 Hz, 220 Hz) = {msep(tone(220), tone(220)):.2e} Hz^2")
print(f"MSED([10, 10], [11, 9]) = {msed([10, 10], [11, 9])}")

glide = Waveform(0.5 * np.sin(2 * np.pi * np.cumsum(np.linspace(150, 300, SR)) / SR), SR)
f0, voiced = extract_f0(glide)
print("glide F0 every 10th frame:", np.round(f0[::10]).astype(int).tolist())
print(f"voiced frames: {int(voiced.sum())}/{len(voiced)}")
