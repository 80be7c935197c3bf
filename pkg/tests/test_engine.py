"""Engine pipeline semantics: triggering, entity gating, metrics, serving."""

import io
import json
import urllib.request

import numpy as np
import pytest

import aiswatch.engine as engine_mod
from aiswatch.changepoint import CpdConfig
from aiswatch.checkpoint import Checkpoint
from aiswatch.engine import (
    Engine,
    ServeStats,
    serve_stream,
    start_metrics_server,
)
from aiswatch.features import FeatureConfig
from aiswatch.ingest import AisMessage, format_record
from aiswatch.model import ModelConfig, init_weights
from aiswatch.postprocess import PostProcessConfig
from aiswatch.taxonomy import ACTIVITY_CLASSES, ENTITY_CLASSES, EntityClass

FCFG = FeatureConfig(n_anchor=2)


def small_checkpoint(class_names, seed=0):
    cfg = ModelConfig(feature_width=FCFG.feature_width,
                      n_classes=len(class_names), d_model=16, n_heads=2,
                      d_ff=32, n_cpe_layers=1, n_cnn_layers=1,
                      n_transformer_layers=1, max_seq_len=2048)
    return Checkpoint(model_config=cfg, feature_config=FCFG,
                      class_names=tuple(class_names),
                      weights=init_weights(cfg, seed=seed))


@pytest.fixture
def activity_ckpt():
    return small_checkpoint(ACTIVITY_CLASSES, seed=1)


@pytest.fixture
def entity_ckpt():
    return small_checkpoint(ENTITY_CLASSES, seed=2)


def msg(t, entity="v1", sog=10.0, lat=45.0, lon=-30.0, cog=90.0):
    return AisMessage(entity_id=entity, timestamp=t, lat=lat, lon=lon,
                      sog=sog, cog=cog)


def feed_steady(engine, n, t0=1_700_000_000, entity="v1", sog=10.0):
    events = []
    for i in range(n):
        ev = engine.on_message(msg(t0 + 60 * i, entity=entity, sog=sog))
        if ev is not None:
            events.append(ev)
    return events


class FakeClock:
    def __init__(self):
        self.now = 1000.0

    def __call__(self):
        return self.now


class TestTriggering:
    def test_first_message_no_event(self, activity_ckpt):
        eng = Engine(activity=activity_ckpt)
        assert eng.on_message(msg(1_700_000_000)) is None

    def test_steady_stream_stays_quiet(self, activity_ckpt):
        eng = Engine(activity=activity_ckpt)
        assert feed_steady(eng, 50) == []
        assert eng.metrics_snapshot().changepoints_fired == 0

    def test_seven_hour_gap_fires_time_gap_event(self, activity_ckpt):
        eng = Engine(activity=activity_ckpt)
        t0 = 1_700_000_000
        assert eng.on_message(msg(t0)) is None
        ev = eng.on_message(msg(t0 + 7 * 3600))
        assert ev is not None
        assert ev.trigger_reason == "time_gap"
        assert ev.entity_id == "v1"
        assert ev.timestamp == t0 + 7 * 3600

    def test_sog_shift_fires_exactly_once(self, activity_ckpt):
        """A +1.2 kn step crosses the rolling-mean gate at exactly one
        message."""
        eng = Engine(activity=activity_ckpt)
        t0 = 1_700_000_000
        events = feed_steady(eng, 10, t0=t0, sog=10.0)
        for i in range(10):
            ev = eng.on_message(msg(t0 + 60 * (10 + i), sog=11.2))
            if ev is not None:
                events.append(ev)
        assert len(events) == 1
        assert events[0].trigger_reason == "sog_shift"

    def test_exactly_one_event_per_changepoint(self, activity_ckpt):
        """Counted events always equal counted trigger firings."""
        eng = Engine(activity=activity_ckpt)
        rng = np.random.default_rng(0)
        t = 1_700_000_000
        emitted = 0
        for _ in range(300):
            t += int(rng.choice([60, 60, 60, 30_000]))
            ev = eng.on_message(msg(t, sog=float(rng.uniform(0, 20))))
            emitted += ev is not None
        snap = eng.metrics_snapshot()
        assert snap.changepoints_fired == emitted
        assert snap.events_total == emitted

    def test_entities_isolated(self, activity_ckpt):
        """One entity's gap never fires another entity's trigger."""
        eng = Engine(activity=activity_ckpt)
        t0 = 1_700_000_000
        eng.on_message(msg(t0, entity="a"))
        eng.on_message(msg(t0 + 60, entity="b"))
        ev = eng.on_message(msg(t0 + 7 * 3600, entity="b"))
        assert ev is not None and ev.entity_id == "b"
        # entity a has seen no second message, so no event for it
        assert eng.metrics_snapshot().changepoints_fired == 1


class TestDuplicates:
    def test_duplicate_short_circuits(self, activity_ckpt):
        eng = Engine(activity=activity_ckpt)
        t0 = 1_700_000_000
        eng.on_message(msg(t0))
        first = eng.on_message(msg(t0 + 7 * 3600))
        assert first is not None
        again = eng.on_message(msg(t0 + 7 * 3600))
        assert again is None  # exact duplicate: no re-evaluation
        snap = eng.metrics_snapshot()
        assert snap.duplicates == 1
        assert snap.changepoints_fired == 1


class TestEntityClassification:
    def test_no_entity_model_means_unknown(self, activity_ckpt):
        eng = Engine(activity=activity_ckpt)
        feed_steady(eng, 600)
        assert eng.classify_entity("v1") is EntityClass.UNKNOWN

    def test_context_boundary_at_500(self, activity_ckpt, entity_ckpt):
        eng = Engine(activity=activity_ckpt, entity=entity_ckpt)
        feed_steady(eng, 499)
        assert eng.classify_entity("v1") is EntityClass.UNKNOWN
        feed_steady(eng, 1, t0=1_700_000_000 + 60 * 499)
        verdict = eng.classify_entity("v1")
        assert verdict in (EntityClass.VESSEL, EntityClass.BUOY)

    def test_unseen_entity_unknown(self, activity_ckpt, entity_ckpt):
        eng = Engine(activity=activity_ckpt, entity=entity_ckpt)
        assert eng.classify_entity("ghost") is EntityClass.UNKNOWN

    def test_verdict_cached_until_refresh_increment(self, activity_ckpt,
                                                    entity_ckpt,
                                                    monkeypatch):
        eng = Engine(activity=activity_ckpt, entity=entity_ckpt,
                     entity_min_context=10, entity_refresh_increment=10)
        calls = {"entity": 0}
        real_forward = engine_mod.forward

        def counting(cfg, w, x):
            if cfg is entity_ckpt.model_config:
                calls["entity"] += 1
            return real_forward(cfg, w, x)

        monkeypatch.setattr(engine_mod, "forward", counting)
        feed_steady(eng, 10)
        eng.classify_entity("v1")
        assert calls["entity"] == 1
        # history unchanged: cache hit, no new model call
        eng.classify_entity("v1")
        eng.classify_entity("v1")
        assert calls["entity"] == 1
        # nine more messages: still below the refresh increment
        feed_steady(eng, 9, t0=1_700_000_000 + 600)
        eng.classify_entity("v1")
        assert calls["entity"] == 1
        # the tenth crosses it: recompute
        feed_steady(eng, 1, t0=1_700_000_000 + 600 + 9 * 60)
        eng.classify_entity("v1")
        assert calls["entity"] == 2

    def test_fishing_never_emitted_without_vessel_verdict(self, activity_ckpt,
                                                          entity_ckpt):
        """Below the context floor the entity is Unknown, so fishing is
        gated no matter what the activity model says."""
        eng = Engine(activity=activity_ckpt, entity=entity_ckpt,
                     post=PostProcessConfig.identity())
        rng = np.random.default_rng(3)
        t = 1_700_000_000
        for _ in range(200):
            t += int(rng.choice([60, 30_000]))
            ev = eng.on_message(msg(t, sog=float(rng.uniform(0, 20))))
            if ev is not None and ev.entity_class != "vessel":
                assert ev.label != "fishing"


class TestValidation:
    def test_bad_engine_params(self, activity_ckpt):
        with pytest.raises(ValueError):
            Engine(activity=activity_ckpt, entity_min_context=0)
        with pytest.raises(ValueError):
            Engine(activity=activity_ckpt, entity_refresh_increment=0)


class TestDeadLetters:
    def test_pipeline_failure_keeps_stream_alive(self, activity_ckpt,
                                                 monkeypatch):
        eng = Engine(activity=activity_ckpt)
        t0 = 1_700_000_000
        eng.on_message(msg(t0))

        real = engine_mod.build_features
        boom = {"armed": True}

        def flaky(window, cfg):
            if boom["armed"]:
                boom["armed"] = False
                raise RuntimeError("synthetic stage failure")
            return real(window, cfg)

        monkeypatch.setattr(engine_mod, "build_features", flaky)
        assert eng.on_message(msg(t0 + 7 * 3600)) is None
        assert len(eng.dead_letters) == 1
        dl = eng.dead_letters[0]
        assert dl.stage == "pipeline"
        assert "synthetic stage failure" in dl.error
        assert dl.entity_id == "v1"
        # next trigger classifies normally
        ev = eng.on_message(msg(t0 + 14 * 3600))
        assert ev is not None
        assert eng.metrics_snapshot().dead_letters == 1


class TestMetrics:
    def test_counts_partition(self, activity_ckpt):
        eng = Engine(activity=activity_ckpt,
                     post=PostProcessConfig.identity())
        rng = np.random.default_rng(1)
        t = 1_700_000_000
        for _ in range(400):
            t += int(rng.choice([60, 30_000]))
            eng.on_message(msg(t, sog=float(rng.uniform(0, 20))))
        snap = eng.metrics_snapshot()
        assert snap.messages_ingested == 400
        assert snap.events_total == sum(snap.per_class_counts.values())
        assert snap.events_total == snap.changepoints_fired
        assert set(ACTIVITY_CLASSES) <= set(snap.per_class_counts)

    def test_unknown_label_counted(self, activity_ckpt):
        """A high threshold funnels every event into the unknown bucket."""
        eng = Engine(activity=activity_ckpt,
                     post=PostProcessConfig(confidence_threshold=0.999))
        t0 = 1_700_000_000
        eng.on_message(msg(t0))
        eng.on_message(msg(t0 + 7 * 3600))
        snap = eng.metrics_snapshot()
        assert snap.per_class_counts.get("unknown") == 1
        assert snap.events_total == 1

    def test_rates_use_sliding_window(self, activity_ckpt):
        clock = FakeClock()
        eng = Engine(activity=activity_ckpt, metrics_window_s=60.0,
                     clock=clock, post=PostProcessConfig.identity())
        t0 = 1_700_000_000
        eng.on_message(msg(t0))
        ev = eng.on_message(msg(t0 + 7 * 3600))
        assert ev is not None
        snap = eng.metrics_snapshot()
        assert snap.per_class_rates[ev.label] == pytest.approx(1.0 / 60.0)
        clock.now += 120.0  # event ages out of the window
        snap2 = eng.metrics_snapshot()
        assert snap2.per_class_rates[ev.label] == 0.0
        assert snap2.per_class_counts[ev.label] == 1  # counts never expire


class TestServeStream:
    def stream_lines(self, n_gap_events=2):
        """CSV lines for one entity with n_gap_events huge gaps."""
        t = 1_700_000_000
        lines = [format_record(msg(t), "csv")]
        for i in range(n_gap_events):
            t += 7 * 3600
            lines.append(format_record(msg(t), "csv"))
        return lines

    def test_events_written_as_json_lines(self, activity_ckpt):
        eng = Engine(activity=activity_ckpt)
        out = io.StringIO()
        stats = serve_stream(eng, self.stream_lines(2), out)
        assert isinstance(stats, ServeStats)
        assert stats.lines_read == 3
        assert stats.events_emitted == 2
        rows = [json.loads(line) for line in
                out.getvalue().strip().splitlines()]
        assert len(rows) == 2
        for row in rows:
            assert row["entity_id"] == "v1"
            assert row["trigger_reason"] == "time_gap"
            assert set(row["probs"]) == set(ACTIVITY_CLASSES)

    def test_malformed_line_becomes_dead_letter(self, activity_ckpt):
        eng = Engine(activity=activity_ckpt)
        out = io.StringIO()
        lines = self.stream_lines(1)
        lines.insert(1, "not,a,valid,record")
        stats = serve_stream(eng, lines, out)
        assert stats.events_emitted == 1  # stream survived
        assert stats.dead_letters == 1
        assert eng.dead_letters[0].stage == "parse"

    def test_blank_lines_skipped(self, activity_ckpt):
        eng = Engine(activity=activity_ckpt)
        out = io.StringIO()
        lines = ["", *self.stream_lines(1), "   "]
        stats = serve_stream(eng, lines, out)
        assert stats.lines_read == 2

    def test_event_timestamps_nondecreasing_per_entity(self, activity_ckpt):
        eng = Engine(activity=activity_ckpt)
        out = io.StringIO()
        rng = np.random.default_rng(5)
        t = {"a": 1_700_000_000, "b": 1_700_000_000}
        lines = []
        for _ in range(200):
            e = "a" if rng.random() < 0.5 else "b"
            t[e] += int(rng.choice([60, 30_000]))
            lines.append(format_record(msg(t[e], entity=e,
                                           sog=float(rng.uniform(0, 20))),
                                       "csv"))
        serve_stream(eng, lines, out)
        last: dict[str, int] = {}
        for line in out.getvalue().strip().splitlines():
            row = json.loads(line)
            eid = row["entity_id"]
            assert last.get(eid, 0) <= row["timestamp"]
            last[eid] = row["timestamp"]

    def test_on_event_callback_invoked(self, activity_ckpt):
        eng = Engine(activity=activity_ckpt)
        seen = []
        serve_stream(eng, self.stream_lines(2), io.StringIO(),
                     on_event=seen.append)
        assert len(seen) == 2


class TestMetricsServer:
    def test_http_snapshot(self, activity_ckpt):
        eng = Engine(activity=activity_ckpt)
        t0 = 1_700_000_000
        eng.on_message(msg(t0))
        eng.on_message(msg(t0 + 7 * 3600))
        server = start_metrics_server(eng, port=0)
        try:
            port = server.server_address[1]
            with urllib.request.urlopen(
                    f"http://127.0.0.1:{port}/") as resp:
                body = json.loads(resp.read())
            assert body["messages_ingested"] == 2
            assert body["events_total"] == 1
            assert "per_class_counts" in body
            assert "per_class_rates" in body
        finally:
            server.shutdown()
            server.server_close()
