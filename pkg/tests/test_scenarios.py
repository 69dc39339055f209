"""End-to-end runs of the builtin scenarios through both pipelines."""

import pytest

from config import Knobs
from evaluation import aggregate, match_clusters
from pipeline import motion_guided, run_face_guided
from simulator import builtin_scenarios, generate


def _run_motion_guided(name, mic):
    dataset = generate(builtin_scenarios()[name], mic)
    scores, prev = [], None
    for obs, gt in dataset:
        result = motion_guided(obs, mic, prev)
        prev = result.params
        scores.append(match_clusters(result.objects, gt.visible_targets()))
    return aggregate(scores), len(dataset)


@pytest.mark.slow
def test_static_constant_scene(mic):
    table, n_intervals = _run_motion_guided("StaCon", mic)
    assert n_intervals >= 400
    assert table.loc_tp_rate >= 90.0
    assert table.ale <= 0.06
    assert table.audio_tp_rate >= 75.0


@pytest.mark.slow
def test_dynamic_constant_scene(mic):
    table, _ = _run_motion_guided("DynCon", mic)
    assert table.ale <= 0.15
    assert table.audio_tp_rate >= 75.0


@pytest.mark.slow
@pytest.mark.parametrize("name", ["StaVar", "DynVar"])
def test_varying_scenes_speaking_state(name, mic):
    table, _ = _run_motion_guided(name, mic)
    assert table.audio_tp_rate >= 75.0


@pytest.mark.parametrize("name", ["S1", "S2", "S4"])
def test_face_guided_rooms(name, mic):
    spec = builtin_scenarios()[name]
    knobs = Knobs()
    for obs, gt in generate(spec, mic):
        result = run_face_guided(obs, mic, knobs)
        assert len(result.objects) == obs.visual_3d.shape[0]
        if result.n_auditory == 0:
            assert not any(o.speaking for o in result.objects)
        if not any(o.speaking for o in gt.objects):
            assert result.n_auditory == 0


def test_speaker_outside_the_view_has_no_object(mic):
    spec = builtin_scenarios()["S4"]
    spec.duration_s = 24.0
    for obs, gt in generate(spec, mic):
        result = run_face_guided(obs, mic, Knobs())
        assert len(result.objects) == 2
        assert len(gt.visible_targets()) == 2
