import numpy as np
import pytest

from av_geometry import ScenePoint, itd_map_corrected
from errors import InvalidInputError
from event_sync import read_replay, write_replay
from mixture import OutlierDomain
from simulator import (
    ITD_SCOPE,
    LEFT_CAMERA,
    RIGHT_CAMERA,
    ObjectTrack,
    ScenarioSpec,
    builtin_scenarios,
    dataset_to_events,
    generate,
    load_scenario,
    read_dataset,
    save_scenario,
    write_dataset,
)


def _static(position, speaking=True, name="obj"):
    return ObjectTrack(
        waypoints=[(0.0, ScenePoint(*position))],
        visible=[(0.0, 100.0)],
        speaking=[(0.0, 100.0)] if speaking else [],
        name=name,
    )


def test_track_interpolates_between_waypoints():
    track = ObjectTrack(
        waypoints=[(0.0, ScenePoint(0.0, 0.0, 2.0)), (10.0, ScenePoint(1.0, 0.0, 3.0))],
        visible=[(0.0, 5.0)],
        speaking=[(2.0, 4.0)],
    )
    np.testing.assert_allclose(track.position_at(5.0)[0], [0.5, 0.0, 2.5])
    np.testing.assert_allclose(track.position_at(20.0)[0], [1.0, 0.0, 3.0])
    assert track.is_visible(4.9) and not track.is_visible(5.0)
    assert track.is_speaking(2.0) and not track.is_speaking(4.0)
    assert not track.is_static


@pytest.mark.parametrize(
    "kwargs",
    [
        {"waypoints": []},
        {"waypoints": [(1.0, ScenePoint(0, 0, 1)), (1.0, ScenePoint(0, 0, 2))]},
        {"waypoints": [(0.0, ScenePoint(0, 0, 1))], "visible": [(3.0, 2.0)]},
    ],
)
def test_track_validation(kwargs):
    with pytest.raises(InvalidInputError):
        ObjectTrack(**kwargs)


def test_noiseless_generation(mic):
    position = (0.4, 0.1, 2.0)
    spec = ScenarioSpec(
        duration_s=0.8,
        objects=[_static(position)],
        visual_noise_sigma=0.0,
        itd_noise_sigma=0.0,
        visual_outlier_rate=0.0,
        itd_outlier_rate=0.0,
        visual_points_per_object=30,
        itd_points_per_speaking_object=20,
    )
    for obs, gt in generate(spec, mic):
        assert np.all(obs.visual_3d == np.array(position))
        np.testing.assert_allclose(obs.auditory, itd_map_corrected(ScenePoint(*position), mic), rtol=1e-12)
        assert np.all(gt.visual_labels == 0) and np.all(gt.auditory_labels == 0)


def test_generation_is_deterministic(mic):
    spec = builtin_scenarios()["DynVar"]
    spec.duration_s = 4.0
    first, second = generate(spec, mic), generate(spec, mic)
    for (obs_a, _), (obs_b, _) in zip(first, second):
        np.testing.assert_array_equal(obs_a.visual_3d, obs_b.visual_3d)
        np.testing.assert_array_equal(obs_a.auditory, obs_b.auditory)


def test_counts_match_configured_rates(mic):
    spec = ScenarioSpec(
        duration_s=40.0,
        objects=[
            _static((-0.9, 0.0, 2.5), name="left"),
            _static((0.0, 0.0, 2.2), speaking=False, name="middle"),
            _static((0.9, 0.0, 2.6), name="right"),
        ],
        visual_points_per_object=633,
        visual_outlier_rate=100.5,
        itd_points_per_speaking_object=10,
        itd_outlier_rate=0.5,
        seed=21,
    )
    dataset = generate(spec, mic)
    assert len(dataset) == 100
    visual = np.mean([obs.visual_3d.shape[0] for obs, _ in dataset])
    auditory = np.mean([obs.auditory.size for obs, _ in dataset])
    assert visual == pytest.approx(3 * 633 + 100.5, rel=0.01)
    assert auditory == pytest.approx(20.5, rel=0.01)


def test_default_noise_and_outlier_levels(mic):
    spec = ScenarioSpec(
        duration_s=4.0,
        objects=[
            _static((-0.9, 0.0, 2.5), name="left"),
            ObjectTrack(
                waypoints=[(0.0, ScenePoint(0.9, 0.0, 2.6))],
                visible=[(0.0, 2.0)],
                speaking=[(0.0, 2.0)],
                name="right",
            ),
        ],
        visual_points_per_object=400,
        itd_points_per_speaking_object=20,
        seed=5,
    )
    assert spec.visual_noise_sigma == 0.03
    assert spec.itd_noise_sigma == 2e-5

    for obs, gt in generate(spec, mic):
        visible = sum(o.visible for o in gt.objects)
        speaking = sum(o.speaking for o in gt.objects)
        # 5% of the inliers of the same interval
        assert np.sum(gt.visual_labels == -1) == 20 * visible
        assert np.sum(gt.auditory_labels == -1) == speaking


def test_labels_tag_every_observation(mic):
    spec = builtin_scenarios()["StaVar"]
    spec.duration_s = 2.0
    for obs, gt in generate(spec, mic):
        assert gt.visual_labels.size == obs.visual_3d.shape[0]
        assert gt.auditory_labels.size == obs.auditory.size
        visible = {o.object_id for o in gt.objects if o.visible}
        speaking = {o.object_id for o in gt.objects if o.speaking}
        assert set(gt.visual_labels[gt.visual_labels >= 0]) <= visible
        assert set(gt.auditory_labels[gt.auditory_labels >= 0]) <= speaking


def test_itd_inliers_stay_in_domain(mic):
    domain = OutlierDomain.from_mic_config(mic, 0.1)
    spec = builtin_scenarios()["DynCon"]
    spec.duration_s = 8.0
    for obs, _ in generate(spec, mic):
        assert np.all(domain.contains(obs.auditory))


def test_noisy_spec_leaving_domain_is_rejected(mic):
    spec = ScenarioSpec(duration_s=0.4, objects=[_static((1.5, 0.0, 0.6))], itd_noise_sigma=1e-4)
    with pytest.raises(InvalidInputError):
        generate(spec, mic)


def test_builtin_scenarios():
    scenarios = builtin_scenarios()
    assert set(scenarios) == {"StaCon", "DynCon", "StaVar", "DynVar", "S1", "S2", "S3", "S4", "S5"}

    stacon = scenarios["StaCon"]
    assert all(track.is_static for track in stacon.objects)
    assert all(track.visible == [(0.0, 1e9)] for track in stacon.objects)
    assert stacon.n_intervals >= 400

    dynvar = scenarios["DynVar"]
    assert any(not track.is_static for track in dynvar.objects)
    assert any(len(track.visible) > 1 for track in dynvar.objects)

    outside = [t for t in scenarios["S4"].objects if not t.visible]
    assert len(outside) == 1 and outside[0].speaking


def test_scenario_file_round_trip(tmp_path):
    spec = builtin_scenarios()["DynCon"]
    path = tmp_path / "scenario.json"
    save_scenario(spec, path)
    loaded = load_scenario(path)
    assert loaded.to_dict() == spec.to_dict()


def test_scenario_with_unknown_keys(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"duration_s": 4.0, "objects": [], "speed_of_light": 1}')
    with pytest.raises(InvalidInputError):
        load_scenario(path)


def test_dataset_file(tmp_path, mic):
    spec = builtin_scenarios()["S2"]
    spec.duration_s = 2.0
    dataset = generate(spec, mic)
    path = tmp_path / "observations.jsonl"
    write_dataset(dataset, path)
    loaded = read_dataset(path)
    assert len(loaded) == len(dataset)
    np.testing.assert_array_equal(loaded[3][0].visual_3d, dataset[3][0].visual_3d)
    assert loaded[3][1].visible_targets() == dataset[3][1].visible_targets()


def test_events_mirror_the_dataset(tmp_path, mic):
    spec = builtin_scenarios()["S1"]
    spec.duration_s = 2.0
    dataset = generate(spec, mic)
    events = dataset_to_events(dataset, seed=3)

    by_scope = {scope: [e for e in events if e.scope == scope] for scope in (LEFT_CAMERA, RIGHT_CAMERA, ITD_SCOPE)}
    assert len(by_scope[LEFT_CAMERA]) == len(by_scope[RIGHT_CAMERA]) == len(dataset)
    assert len(by_scope[ITD_SCOPE]) == sum(obs.auditory.size for obs, _ in dataset)
    stamps = [e.timestamp for e in events]
    assert stamps == sorted(stamps)

    path = tmp_path / "events.jsonl"
    write_replay(events, path)
    assert [e.scope for e in read_replay(path)] == [e.scope for e in events]
