import numpy as np
import pytest
from hypothesis import settings

from hivestate.audio_io import AudioClip

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


def tone(freq, seconds=1.0, rate=32000, amp=1.0, phase=0.0):
    t = np.arange(int(round(seconds * rate))) / rate
    return AudioClip(amp * np.cos(2 * np.pi * freq * t + phase), rate, f"tone{freq}")


def peak_hz(x, rate):
    spec = np.abs(np.fft.rfft(x * np.hanning(len(x))))
    return np.fft.rfftfreq(len(x), 1 / rate)[int(np.argmax(spec))]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_dataset(root, duration_s, rate, clips_per_state, seed=0, hives=("A", "B")):
    """Write a small synthetic two-hive dataset; returns the manifest path."""
    from hivestate.cli import cmd_synth

    root.mkdir(parents=True, exist_ok=True)
    spec = root / "spec.toml"
    body = [f"duration_s = {duration_s}", f"rate = {rate}", f"clips_per_state = {clips_per_state}"]
    for i, h in enumerate(hives):
        body += ["[[hive]]", f'id = "{h}"', f"fundamental_hz = {250 - 20 * i}"]
    spec.write_text("\n".join(body) + "\n")
    cmd_synth(spec, root / "data", seed)
    return root / "data" / "manifest.csv"


@pytest.fixture(scope="session")
def short_dataset(tmp_path_factory):
    """16 clips of 8 s: enough for the SVM paths, including HHT."""
    return make_dataset(tmp_path_factory.mktemp("short"), 8, 32000, 4)


@pytest.fixture(scope="session")
def minute_dataset(tmp_path_factory):
    """12 one-minute clips at 22.05 kHz: one CNN segment each."""
    return make_dataset(tmp_path_factory.mktemp("minute"), 60, 22050, 3)
