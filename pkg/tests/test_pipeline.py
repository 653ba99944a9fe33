import json
from pathlib import Path

import numpy as np
import pytest

from cascadet import detector as D
from cascadet import fixtures
from cascadet import pipeline as P
from cascadet import weights as W
from cascadet.classifier import BackboneSpec, MaskLabel, build_classifier

from generate_golden import compute_golden

GOLDEN_PATH = Path(__file__).parent / "data" / "golden_trace.json"


def make_frame(seed=0, width=64, height=48, index=0):
    return P.Frame(index=index, width=width, height=height,
                   pixels=fixtures.synthetic_frame(seed, width, height))


class TestPpm:
    def test_documented_two_pixel_file(self):
        data = b"P6\n2 1\n255\n" + bytes([255, 0, 0, 0, 0, 255])
        pixels = P.parse_ppm(data)
        assert pixels.shape == (1, 2, 3)
        assert tuple(pixels[0, 0]) == (255, 0, 0)
        assert tuple(pixels[0, 1]) == (0, 0, 255)

    def test_header_comments_allowed(self):
        data = b"P6\n# a comment\n2 1\n# another\n255\n" + bytes(6)
        assert P.parse_ppm(data).shape == (1, 2, 3)

    def test_wrong_magic_rejected(self):
        with pytest.raises(P.FrameReadError, match="magic"):
            P.parse_ppm(b"P5\n2 1\n255\n" + bytes(6))

    def test_wrong_maxval_rejected(self):
        with pytest.raises(P.FrameReadError, match="maxval"):
            P.parse_ppm(b"P6\n2 1\n65535\n" + bytes(12))

    def test_truncated_pixels_rejected(self):
        with pytest.raises(P.FrameReadError, match="truncated"):
            P.parse_ppm(b"P6\n2 2\n255\n" + bytes(5))

    def test_write_read_round_trip(self, tmp_path):
        frame = make_frame()
        path = tmp_path / "f.ppm"
        P.write_ppm(path, frame.pixels)
        np.testing.assert_array_equal(P.parse_ppm(path.read_bytes()),
                                      frame.pixels)


class TestReadFrames:
    def test_empty_manifest(self, tmp_path):
        manifest = tmp_path / "frames.txt"
        manifest.write_text("")
        assert list(P.read_frames(manifest)) == []

    def test_indices_follow_manifest_order(self, tmp_path):
        names = []
        for i in range(3):
            name = f"img{i}.ppm"
            P.write_ppm(tmp_path / name, make_frame(seed=i).pixels)
            names.append(name)
        manifest = tmp_path / "frames.txt"
        manifest.write_text("\n".join(names) + "\n")
        frames = list(P.read_frames(manifest))
        assert [f.index for f in frames] == [0, 1, 2]
        assert [f.source for f in frames] == names

    def test_missing_file_names_the_line(self, tmp_path):
        manifest = tmp_path / "frames.txt"
        P.write_ppm(tmp_path / "ok.ppm", make_frame().pixels)
        manifest.write_text("ok.ppm\nmissing.ppm\n")
        with pytest.raises(P.FrameReadError, match="line 2"):
            list(P.read_frames(manifest))

    def test_bad_ppm_names_the_line(self, tmp_path):
        manifest = tmp_path / "frames.txt"
        (tmp_path / "bad.ppm").write_bytes(b"not a ppm at all")
        manifest.write_text("bad.ppm\n")
        with pytest.raises(P.FrameReadError, match="line 1"):
            list(P.read_frames(manifest))


class TestAnnotate:
    def detection(self, **kwargs):
        args = dict(frame_index=0, x1=10, y1=12, x2=30, y2=32,
                    label=MaskLabel.MASK, confidence=0.87, face_score=0.9)
        args.update(kwargs)
        return P.Detection(**args)

    def test_no_detections_returns_frame_unchanged(self):
        frame = make_frame()
        out = P.annotate(frame, [])
        assert out.pixels.tobytes() == frame.pixels.tobytes()

    def test_mask_outline_is_pure_green(self):
        frame = make_frame()
        out = P.annotate(frame, [self.detection()])
        changed = np.argwhere((out.pixels != frame.pixels).any(axis=2))
        assert len(changed) > 0
        det = self.detection()
        outline = [tuple(yx) for yx in changed
                   if det.y1 <= yx[0] < det.y2 and det.x1 <= yx[1] < det.x2]
        assert outline
        for y, x in outline:
            assert tuple(out.pixels[y, x]) == (0, 255, 0)

    def test_nomask_outline_is_pure_red(self):
        frame = make_frame()
        out = P.annotate(frame, [self.detection(label=MaskLabel.NO_MASK)])
        det = self.detection()
        assert tuple(out.pixels[det.y1, det.x1]) == (255, 0, 0)

    def test_changes_confined_to_outline_and_label(self):
        frame = make_frame()
        det = self.detection()
        out = P.annotate(frame, [det])
        changed = np.argwhere((out.pixels != frame.pixels).any(axis=2))
        for y, x in changed:
            in_box = det.x1 <= x < det.x2 and det.y1 <= y < det.y2
            above = det.x1 <= x and y < det.y1
            assert in_box or above, (y, x)

    def test_annotation_idempotent(self):
        frame = make_frame()
        dets = [self.detection(), self.detection(x1=40, y1=2, x2=60, y2=22,
                                                 label=MaskLabel.NO_MASK)]
        once = P.annotate(frame, dets)
        twice = P.annotate(once, dets)
        assert once.pixels.tobytes() == twice.pixels.tobytes()

    def test_label_moves_below_top_edge(self):
        frame = make_frame()
        det = self.detection(y1=0, y2=20)
        out = P.annotate(frame, [det])  # must not raise or write out of bounds
        assert out.pixels.shape == frame.pixels.shape

    def test_never_writes_outside_frame(self):
        frame = make_frame(width=40, height=30)
        det = self.detection(x1=35, y1=25, x2=40, y2=30)
        out = P.annotate(frame, [det])
        assert out.width == 40 and out.height == 30

    def test_source_frame_unmodified(self):
        frame = make_frame()
        snapshot = frame.pixels.copy()
        P.annotate(frame, [self.detection()])
        np.testing.assert_array_equal(frame.pixels, snapshot)


@pytest.fixture(scope="module")
def golden():
    return json.loads(GOLDEN_PATH.read_text())


@pytest.fixture(scope="module")
def stack():
    networks = D.CascadeNetworks.from_archive(fixtures.fixture_cascade_archive())
    spec = BackboneSpec()
    classifier = build_classifier(spec,
                                  fixtures.fixture_classifier_archive(spec))
    return networks, classifier, spec


class TestProcessFrame:
    def test_matches_golden_trace(self, golden, stack):
        fresh = compute_golden()
        assert fresh["trace"] == golden["trace"]
        assert fresh["candidates"] == golden["candidates"]
        assert fresh["detections"] == golden["detections"]

    def test_boxes_inside_frame(self, golden):
        for det in golden["detections"]:
            assert 0 <= det["x1"] < det["x2"] <= golden["frame"]["width"]
            assert 0 <= det["y1"] < det["y2"] <= golden["frame"]["height"]

    def test_empty_frame_gives_no_detections(self, stack):
        networks, classifier, spec = stack
        frame = P.Frame(index=0, width=64, height=48,
                        pixels=np.zeros((48, 64, 3), np.uint8))
        dets = P.process_frame(frame, networks, classifier,
                               D.CascadeConfig(), spec)
        assert dets == []


def write_run_setup(tmp_path, frame_seeds, width=320, height=240,
                    extra_config=""):
    frames_dir = tmp_path / "frames"
    frames_dir.mkdir(exist_ok=True)
    lines = []
    for i, seed in enumerate(frame_seeds):
        name = f"frame{i:03d}.ppm"
        P.write_ppm(frames_dir / name,
                    fixtures.synthetic_frame(seed, width, height))
        lines.append(f"frames/{name}")
    (tmp_path / "frames.txt").write_text("\n".join(lines) + ("\n" if lines else ""))

    W.save(fixtures.fixture_cascade_archive(), tmp_path / "cascade.cwts")
    W.save(fixtures.fixture_classifier_archive(), tmp_path / "classifier.cwts")
    (tmp_path / "run.cfg").write_text(
        "manifest=frames.txt\n"
        "output_dir=out\n"
        "cascade_weights=cascade.cwts\n"
        "classifier_weights=classifier.cwts\n"
        + extra_config)
    return tmp_path / "run.cfg"


class TestRun:
    def test_empty_manifest(self, tmp_path):
        config_path = write_run_setup(tmp_path, [])
        config = P.parse_config(config_path)
        summary = P.run(config)
        assert summary.frames == 0
        assert summary.detections == 0
        assert (tmp_path / "out" / "detections.jsonl").read_text() == ""

    def test_log_line_count_equals_detections(self, tmp_path):
        config_path = write_run_setup(tmp_path, [0, 1])
        summary = P.run(P.parse_config(config_path))
        lines = (tmp_path / "out" / "detections.jsonl").read_text().splitlines()
        assert len(lines) == summary.detections
        for line in lines:
            obj = json.loads(line)
            assert list(obj) == ["frame", "x1", "y1", "x2", "y2", "label",
                                 "confidence", "face_score"]

    def test_outputs_byte_identical_across_runs(self, tmp_path):
        config_path = write_run_setup(tmp_path, [0, 1, 2])
        config = P.parse_config(config_path)
        P.run(config)
        first_log = (tmp_path / "out" / "detections.jsonl").read_bytes()
        first_frames = {p.name: p.read_bytes()
                        for p in (tmp_path / "out").glob("*.ppm")}
        P.run(config)
        assert (tmp_path / "out" / "detections.jsonl").read_bytes() == first_log
        for p in (tmp_path / "out").glob("*.ppm"):
            assert p.read_bytes() == first_frames[p.name]

    def test_annotated_frames_mirror_input_names(self, tmp_path):
        config_path = write_run_setup(tmp_path, [0])
        P.run(P.parse_config(config_path))
        assert (tmp_path / "out" / "frame000.ppm").exists()
        assert (tmp_path / "out" / "summary.json").exists()

    def test_failed_frame_skipped(self, tmp_path, capsys):
        config_path = write_run_setup(tmp_path, [0, 1, 2])
        frames_dir = tmp_path / "frames"
        (frames_dir / "frame001.ppm").write_bytes(b"P6\n9 9\n255\n")
        summary = P.run(P.parse_config(config_path))
        assert summary.frames == 3
        assert summary.failed_frames == 1

    def test_majority_failure_raises(self, tmp_path):
        config_path = write_run_setup(tmp_path, [0, 1])
        for name in ("frame000.ppm", "frame001.ppm"):
            (tmp_path / "frames" / name).write_bytes(b"P6\n9 9\n255\n")
        with pytest.raises(P.FrameReadError, match="failed"):
            P.run(P.parse_config(config_path))

    def test_missing_weights_rejected(self, tmp_path):
        config_path = write_run_setup(tmp_path, [0])
        (tmp_path / "cascade.cwts").unlink()
        with pytest.raises(P.FrameReadError, match="cascade.cwts"):
            P.run(P.parse_config(config_path))


class TestRunFailureIsolation:
    def test_missing_frame_is_frame_level_failure(self, tmp_path, capsys):
        config_path = write_run_setup(tmp_path, [0, 1])
        (tmp_path / "frames.txt").write_text(
            "frames/frame000.ppm\nframes/none.ppm\n")
        summary = P.run(P.parse_config(config_path))
        assert summary.frames == 2
        assert summary.failed_frames == 1
        assert "none.ppm" in capsys.readouterr().err


class TestParseConfig:
    def test_minimal_config(self, tmp_path):
        config_path = write_run_setup(tmp_path, [])
        config = P.parse_config(config_path)
        assert config.manifest == tmp_path / "frames.txt"
        assert config.workers == 1
        assert config.annotate is True
        assert config.cascade.min_face_size == 20

    def test_overrides_from_file(self, tmp_path):
        config_path = write_run_setup(
            tmp_path, [], extra_config="min_face_size=40\nworkers=4\n"
                                       "annotate=false\nclassifier_extent=64\n")
        config = P.parse_config(config_path)
        assert config.cascade.min_face_size == 40
        assert config.workers == 4
        assert config.annotate is False
        assert config.backbone.input_extent == 64

    def test_environment_overrides(self, tmp_path):
        config_path = write_run_setup(tmp_path, [])
        config = P.parse_config(config_path,
                                env={"CASCADET_WORKERS": "8",
                                     "CASCADET_PYRAMID_FACTOR": "0.5"})
        assert config.workers == 8
        assert config.cascade.pyramid_factor == 0.5

    def test_unknown_key_rejected(self, tmp_path):
        config_path = write_run_setup(tmp_path, [], extra_config="typo_key=1\n")
        with pytest.raises(P.ConfigError, match="typo_key"):
            P.parse_config(config_path)

    def test_missing_required_key_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("manifest=frames.txt\n")
        with pytest.raises(P.ConfigError, match="output_dir"):
            P.parse_config(path)

    def test_bad_value_rejected(self, tmp_path):
        config_path = write_run_setup(tmp_path, [],
                                      extra_config="pyramid_factor=2.0\n")
        with pytest.raises(P.ConfigError):
            P.parse_config(config_path)

    def test_malformed_line_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("just some words\n")
        with pytest.raises(P.ConfigError, match="key=value"):
            P.parse_config(path)
