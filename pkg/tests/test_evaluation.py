import xml.etree.ElementTree as ET
from dataclasses import replace

import numpy as np
import pytest

from boxseq import evaluation as E
from boxseq import model as M
from boxseq.codec import BoxException, Vocab, encode_box
from boxseq.geometry import BoxN
from boxseq.scenegen import GenConfig, build_dataset

SVG_NS = "{http://www.w3.org/2000/svg}"


@pytest.fixture(scope="module")
def vocab():
    return Vocab.default()


@pytest.fixture(scope="module")
def ds(vocab):
    return build_dataset(GenConfig(n_scenes=6, grid_size=4, test_fraction=0.2, seed=1), vocab)


def wrapped(vocab, box):
    return [vocab.bos_id] + encode_box(box, vocab) + [vocab.eos_id]


def fake_report(results, split="test"):
    return E.EvalReport("ckpt", "data", split, 0, E.summarize(results), results)


class TestScore:
    def test_gold_response_is_hit(self, ds, vocab):
        for x in ds.samples_in("test"):
            r = E.score(x, x.response, vocab)
            assert r.hit and r.iou == 1.0 and r.exception is None

    def test_iou_half_is_hit(self, ds, vocab):
        x = replace(ds.samples[0], gold=BoxN(0.0, 0.0, 1.0, 1.0))
        r = E.score(x, wrapped(vocab, BoxN(0.0, 0.0, 0.5, 1.0)), vocab)
        assert r.iou == 0.5 and r.hit

    def test_just_below_half(self, ds, vocab):
        x = replace(ds.samples[0], gold=BoxN(0.0, 0.0, 1.0, 1.0))
        r = E.score(x, wrapped(vocab, BoxN(0.0, 0.0, 0.499, 1.0)), vocab)
        assert not r.hit

    def test_exception_scores_zero(self, ds, vocab):
        r = E.score(ds.samples[0], [vocab.bos_id, vocab.eos_id], vocab)
        assert r.exception == "NoBox" and r.iou == 0.0 and not r.hit and r.pred is None


class TestSummarize:
    def test_all_correct(self, ds, vocab):
        rs = [E.score(x, x.response, vocab) for x in ds.samples_in("test")]
        m = E.summarize(rs)
        assert m["overall"]["acc@0.5"] == 1.0 and m["overall"]["exception_rate"] == 0.0
        assert m["overall"]["n"] == len(rs) == m["detection"]["n"] + m["affordance"]["n"]

    def test_empty_task_is_null(self, ds, vocab):
        rs = [E.score(x, x.response, vocab) for x in ds.samples_in("test") if x.task == "detection"]
        m = E.summarize(rs)
        assert m["affordance"]["n"] == 0
        assert m["affordance"]["acc@0.5"] is None and m["affordance"]["mean_iou"] is None

    def test_exception_counts(self, ds, vocab):
        xs = ds.samples_in("test")[:4]
        rs = [E.score(xs[0], [vocab.bos_id, vocab.eos_id], vocab)]
        rs += [E.score(x, x.response, vocab) for x in xs[1:]]
        m = E.summarize(rs)["overall"]
        assert m["exceptions"] == 1 and m["exception_rate"] == 0.25
        assert m["exceptions_by_reason"]["NoBox"] == 1


class TestReport:
    def test_roundtrip(self, ds, vocab, tmp_path):
        rep = fake_report([E.score(x, x.response, vocab) for x in ds.samples_in("test")])
        rep.write(tmp_path / "r.jsonl")
        back = E.EvalReport.read(tmp_path / "r.jsonl")
        assert back == rep
        assert back.dumps() == rep.dumps()

    def test_line_per_sample(self, ds, vocab):
        rs = [E.score(x, x.response, vocab) for x in ds.samples_in("test")]
        assert len(fake_report(rs).dumps().splitlines()) == len(rs) + 1

    def test_evaluate_checkpoint(self, ds, vocab, tmp_path):
        mcfg = M.ModelConfig(vocab_size=len(vocab), d_model=16, n_layers=1, n_heads=2,
                             grid_size=ds.config.grid_size)
        M.save_checkpoint(tmp_path / "c.ckpt", mcfg, M.init_params(mcfg, 0))
        a = E.evaluate(tmp_path / "c.ckpt", ds, "test", vocab)
        b = E.evaluate(tmp_path / "c.ckpt", ds, "test", vocab)
        assert a.dumps() == b.dumps()
        assert a.metrics["overall"]["n"] == len(ds.samples_in("test"))

    def test_grid_mismatch(self, ds, vocab):
        mcfg = M.ModelConfig(vocab_size=len(vocab), grid_size=8)
        with pytest.raises(E.CheckpointMismatch):
            E.evaluate_params(M.init_params(mcfg, 0), mcfg, ds, "test", vocab)


class TestCompare:
    def test_self_compare_zero(self, ds, vocab):
        rep = fake_report([E.score(x, x.response, vocab) for x in ds.samples_in("test")])
        for row in E.compare(rep, rep):
            if row["n"]:
                assert row["delta_acc"] == row["delta_exc"] == row["delta_miou"] == 0.0

    def test_signs_favour_b(self, ds, vocab):
        xs = ds.samples_in("test")
        bad = fake_report([E.score(x, [vocab.bos_id, vocab.eos_id], vocab) for x in xs])
        good = fake_report([E.score(x, x.response, vocab) for x in xs])
        overall = E.compare(bad, good)[-1]
        assert overall["delta_acc"] == 1.0 and overall["delta_exc"] == 1.0

    def test_split_mismatch(self, ds, vocab):
        a = fake_report([E.score(x, x.response, vocab) for x in ds.samples_in("test")])
        b = replace(a, split="train")
        with pytest.raises(E.SplitMismatch):
            E.compare(a, b)

    def test_sample_mismatch(self, ds, vocab):
        xs = ds.samples_in("test")
        a = fake_report([E.score(x, x.response, vocab) for x in xs])
        b = fake_report([E.score(x, x.response, vocab) for x in xs[1:]])
        with pytest.raises(E.SplitMismatch):
            E.compare(a, b)

    def test_table_and_csv(self, ds, vocab):
        rep = fake_report([E.score(x, x.response, vocab) for x in ds.samples_in("test")])
        rows = E.compare(rep, rep)
        table = E.render_table(rows, "clm", "clm_arl")
        assert "detection" in table and "Acc clm_arl" in table
        csv_lines = E.rows_to_csv(rows).splitlines()
        assert csv_lines[0].split(",") == list(E.COMPARE_FIELDS)
        assert len(csv_lines) == len(rows) + 1


class TestOverlay:
    def parse(self, svg):
        root = ET.fromstring(svg)
        return root, {el.tag.replace(SVG_NS, "") for el in root.iter()}

    def test_well_formed(self, ds):
        scene = ds.scene(0)
        svg = E.render_overlay(scene, scene.objects[0].box, BoxN(0.1, 0.1, 0.4, 0.4), caption="a < b")
        _, tags = self.parse(svg)
        assert tags <= E.SVG_ELEMENTS

    def test_prediction_colours(self, ds):
        scene = ds.scene(0)
        gold = scene.objects[0].box
        svg_a = E.render_overlay(scene, gold, BoxN(0, 0, 0.5, 0.5), "clm_arl")
        svg_c = E.render_overlay(scene, gold, BoxN(0, 0, 0.5, 0.5), "clm")
        assert E.GOLD_COLOR in svg_a and "#17becf" in svg_a
        assert "#ff7f0e" in svg_c and "#17becf" not in svg_c

    def test_exception_gold_only(self, ds):
        scene = ds.scene(0)
        svg = E.render_overlay(scene, scene.objects[0].box, BoxException("NoBox"))
        root, _ = self.parse(svg)
        groups = {g.get("id") for g in root.iter(SVG_NS + "g")}
        assert "gold" in groups and "exception" in groups and "prediction" not in groups
        assert "NoBox" in svg

    def test_linear_scaling(self, ds):
        scene = ds.scene(0)
        gold = BoxN(0.1, 0.2, 0.6, 0.9)
        for size in (200, 400, 800):
            root, _ = self.parse(E.render_overlay(scene, gold, None, size=size))
            g = next(el for el in root.iter(SVG_NS + "g") if el.get("id") == "gold")
            r = g.find(SVG_NS + "rect")
            vals = [float(r.get(k)) for k in ("x", "y", "width", "height")]
            np.testing.assert_allclose(vals, [0.1 * size, 0.2 * size, 0.5 * size, 0.7 * size], atol=0.01)

    def test_pick_samples(self):
        items = list(range(50))
        a = E.pick_overlay_samples(items, 5, seed=2)
        assert a == E.pick_overlay_samples(items, 5, seed=2) and len(a) == 5
        assert E.pick_overlay_samples(items, 0) == []
