import numpy as np
import pytest

from coda import bench, heatmap, tensor
from coda.training import Model, SyntheticTask, TrainConfig, make_task, toy_config, train

TINY = [bench.LayerDims(n=16, d=8, heads=2, d_ffn=16, d_adpt=2)]


class TestBench:
    def test_columns_and_order(self):
        spec = bench.BenchSpec(dims=TINY, r_values=[1, 2], repetitions=1)
        rows = bench.run(spec)
        assert [(r["r"], r["variant"]) for r in rows] == [(1.0, "k_to_k"), (1.0, "k_to_all"),
                                                          (2.0, "k_to_k"), (2.0, "k_to_all")]
        header = bench.to_csv(rows).splitlines()[0]
        assert header.split(",") == list(bench.COLUMNS)

    def test_full_capacity_speedup(self):
        rows = bench.run(bench.BenchSpec(dims=[bench.LayerDims(128, 256, 4, 1024, 16)], r_values=[1],
                                         repetitions=1))
        assert all(0.9 <= float(r["model_speedup"]) <= 1.0 for r in rows)

    def test_flops_columns_repeat_across_threads(self):
        spec = bench.BenchSpec(dims=TINY, r_values=[1, 2, 4], repetitions=1)
        a = bench.to_csv(bench.run(spec, threads=1), bench.DETERMINISTIC_COLUMNS)
        b = bench.to_csv(bench.run(spec, threads=3), bench.DETERMINISTIC_COLUMNS)
        assert a == b

    def test_soft_topk_wall_share_falls_with_d(self):
        dims = [bench.LayerDims(64, 16, 2, 64, 4), bench.LayerDims(64, 256, 4, 1024, 4)]
        rows = bench.run(bench.BenchSpec(dims=dims, r_values=[4], variants=["k_to_k"], repetitions=5))
        assert float(rows[0]["soft_topk_wall_share"]) > float(rows[1]["soft_topk_wall_share"])

    def test_config_hash_distinguishes(self):
        a, b = bench.BenchSpec(dims=TINY, r_values=[1, 2]).configs()[:3:2]
        assert bench.config_hash(a) != bench.config_hash(b)
        assert bench.config_hash(a) == bench.config_hash(bench.BenchSpec(dims=TINY, r_values=[1]).configs()[0])

    def test_spec_validation(self, tmp_path):
        with pytest.raises(ValueError):
            bench.BenchSpec(dims=[], r_values=[1])
        with pytest.raises(ValueError):
            bench.BenchSpec(dims=TINY, r_values=[1], variants=["nope"])
        path = tmp_path / "spec.json"
        path.write_text('{"dims": [{"n": 8, "d": 4, "heads": 2, "d_ffn": 8}], "r_values": [2]}')
        assert bench.load_spec(path).dims[0].d_adpt == 64

    def test_thread_env(self, monkeypatch):
        monkeypatch.setenv(bench.THREADS_ENV, "3")
        assert bench.thread_count() == 3
        monkeypatch.setenv(bench.THREADS_ENV, "x")
        with pytest.raises(ValueError):
            bench.thread_count()


class TestPixels:
    def test_uniform_is_constant_gray(self):
        px = heatmap.to_pixels(np.full(12, 0.25), (3, 4))
        assert px.shape == (3, 4) and np.all(px == 64)

    def test_single_dominant_score(self):
        cfg = toy_config(k=1, r=None)
        model = Model.init(cfg, 1, tensor.Rng(0))
        x = tensor.Rng(1).normal((16, 32)) * 0.1
        w = model.layers[0].router.w
        w[:] = 0
        w[0] = 50.0
        x[5, 0] = 40.0
        px = heatmap.to_pixels(heatmap.routing_weights(model, cfg, x)[0])
        assert px[0, 5] == 255
        assert np.all(np.delete(px[0], 5) == 0)

    def test_pgm_round_trip(self):
        px = np.arange(12, dtype=np.uint8).reshape(3, 4) * 20
        data = heatmap.encode_pgm(px)
        assert data.startswith(b"P5\n4 3\n255\n")
        np.testing.assert_array_equal(heatmap.decode_pgm(data), px)

    def test_pgm_needs_2d(self):
        with pytest.raises(tensor.DimensionError):
            heatmap.encode_pgm(np.zeros(4, dtype=np.uint8))


class TestFixture:
    def test_grid_directive(self, tmp_path):
        path = tmp_path / "f.txt"
        path.write_text("# grid 2 3\n" + tensor.format_tensor(np.ones((6, 2))))
        assert heatmap.load_fixture(path).grid == (2, 3)

    def test_bad_grid(self, tmp_path):
        path = tmp_path / "f.txt"
        path.write_text("# grid 2 2\n" + tensor.format_tensor(np.ones((6, 2))))
        with pytest.raises(tensor.DimensionError):
            heatmap.load_fixture(path)

    def test_shape_mismatch(self):
        cfg = toy_config()
        with pytest.raises(tensor.DimensionError):
            heatmap.routing_weights(Model.init(cfg, 1, tensor.Rng(0)), cfg, np.zeros((16, 8)))


@pytest.fixture(scope="module")
def trained():
    task = SyntheticTask(seed=0)
    cfg = toy_config()
    return train(task, cfg, TrainConfig(steps=2000, eval_interval=2000)).model, cfg, task


@pytest.mark.slow
class TestTrainedHeatmap:
    def test_relevant_positions_light_up(self, trained):
        model, cfg, task = trained
        batch = make_task(task).batch(256, 10**6)
        lam = heatmap.routing_weights(model, cfg, batch.x)[-1]
        rel = batch.relevant.astype(bool)
        assert lam[rel].mean() >= 2 * lam[~rel].mean()

    def test_files(self, trained, tmp_path):
        model, cfg, task = trained
        fixture = heatmap.Fixture(make_task(task).batch(1, 10**6).x[0], (4, 4))
        paths = heatmap.write_heatmaps(model, cfg, fixture, [0, 1], tmp_path)
        assert [p.name for p in paths] == ["layer0.pgm", "layer1.pgm", "lambda.csv"]
        assert heatmap.decode_pgm(paths[1].read_bytes()).shape == (4, 4)
        assert len(paths[2].read_text().splitlines()) == 1 + 2 * 16
        with pytest.raises(IndexError):
            heatmap.write_heatmaps(model, cfg, fixture, [2], tmp_path)
