import numpy as np
import pytest
from hypothesis import settings

from hdrfuse.bracket import BracketConfig, synth_bracket
from hdrfuse.imageio import HdrImage, normalize_frames
from hdrfuse.scene import SceneSequence, SceneSpec, SpriteSpec, generate_sequence

settings.register_profile("ci", deadline=None, max_examples=50)
settings.load_profile("ci")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_sequence(seed=5, size=32, num_frames=5, velocity=(2.0, 0.0), background="gradient-sky"):
    spec = SceneSpec(
        resolution=(size, size),
        num_frames=num_frames,
        background=background,
        dynamic_elements=[
            SpriteSpec(shape="disk", size=9.0, radiance=(0.9, 0.7, 0.4),
                       velocity=velocity, start=(10.0, 16.0))
        ],
        seed=seed,
    )
    return generate_sequence(spec)


def normalized_sequence(seq: SceneSequence) -> SceneSequence:
    frames, _ = normalize_frames(seq.frames)
    return SceneSequence(
        frames=frames, flow=seq.flow, occlusion=seq.occlusion,
        reference_index=seq.reference_index, spec=seq.spec,
    )


@pytest.fixture
def tiny_sequence():
    return make_sequence()


@pytest.fixture
def tiny_bracket(tiny_sequence):
    seq = normalized_sequence(tiny_sequence)
    return synth_bracket(seq, BracketConfig(seed=7))


def random_hdr(rng, h=8, w=8, scale=1.0) -> HdrImage:
    return HdrImage(data=(rng.random((h, w, 3)) * scale).astype(np.float32))
