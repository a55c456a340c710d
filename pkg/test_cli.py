import contextlib
import csv
import io
import os
import shutil
import tempfile
import unittest

import torch
from PIL import Image

from checkpoint import save_checkpoint
from deconver_net import DeconverConfig, NdcLayerConfig, build_network
from main import main
from tensor import FilterTensor, cross_correlate, read_dct1, write_dct1


def run(argv):
    """Run the CLI, returning (exit code, stdout lines as a dict)."""
    out = io.StringIO()
    with contextlib.redirect_stdout(out):
        code = main(["--quiet", *argv])
    values = {}
    for line in out.getvalue().splitlines():
        key, sep, value = line.partition(": ")
        if sep:
            values[key] = value
    return code, values


class SolveCommandTest(unittest.TestCase):
    def setUp(self):
        self.test_dir = tempfile.mkdtemp()
        gen = torch.Generator().manual_seed(0)
        self.v = torch.tensor([[1.0, 0.1], [0.1, 1.0]], dtype=torch.float64).reshape(2, 2, 1, 1)
        self.s_star = torch.rand(2, 8, 8, generator=gen, dtype=torch.float64) + 0.1
        self.x = cross_correlate(self.s_star, FilterTensor(self.v))
        self.x_path = self.path("x.dct1")
        self.v_path = self.path("v.dct1")
        write_dct1(self.x_path, self.x)
        write_dct1(self.v_path, self.v)

    def tearDown(self):
        shutil.rmtree(self.test_dir)

    def path(self, name):
        return os.path.join(self.test_dir, name)

    def test_exact_instance(self):
        """A 1x1 mixing filter with an exact nonnegative solution is recovered."""
        code, values = run(["solve", "--x", self.x_path, "--filter", self.v_path, "--iters", "200",
                            "--out", self.path("s.dct1"), "--trace", self.path("trace.csv")])
        self.assertEqual(code, 0)
        self.assertEqual(values["monotone"], "true")
        self.assertEqual(values["iterations"], "200")
        self.assertLess(float(values["final_error"]), 1e-4 * float(values["initial_error"]))

        s = read_dct1(self.path("s.dct1"))
        self.assertTrue(torch.allclose(s, self.s_star, atol=1e-4))
        with open(self.path("trace.csv"), newline="") as f:
            rows = list(csv.reader(f))
        self.assertEqual(rows[0], ["iter", "error"])
        self.assertEqual(len(rows), 202)

    def test_explicit_init(self):
        init = self.path("s0.dct1")
        write_dct1(init, self.s_star)
        code, values = run(["solve", "--x", self.x_path, "--filter", self.v_path, "--init", init, "--iters", "3"])
        self.assertEqual(code, 0)
        self.assertLess(float(values["final_error"]), 1e-20)

    def test_rejects_zero_iterations(self):
        with self.assertRaises(SystemExit) as ctx:
            main(["solve", "--x", self.x_path, "--filter", self.v_path, "--iters", "0"])
        self.assertEqual(ctx.exception.code, 2)

    def test_malformed_input_exits_2(self):
        with open(self.path("bad.dct1"), "wb") as f:
            f.write(b"not a tensor")
        code, _ = run(["solve", "--x", self.path("bad.dct1"), "--filter", self.v_path])
        self.assertEqual(code, 2)

    def test_negative_input_exits_3(self):
        write_dct1(self.path("neg.dct1"), -self.x)
        code, _ = run(["solve", "--x", self.path("neg.dct1"), "--filter", self.v_path])
        self.assertEqual(code, 3)

    def test_missing_file_exits_3(self):
        code, _ = run(["solve", "--x", self.path("absent.dct1"), "--filter", self.v_path])
        self.assertEqual(code, 3)

    def test_default_precision_is_restored(self):
        before = torch.get_default_dtype()
        run(["--precision", "double", "solve", "--x", self.x_path, "--filter", self.v_path, "--iters", "1"])
        self.assertEqual(torch.get_default_dtype(), before)


class ModelCommandTest(unittest.TestCase):
    def setUp(self):
        self.test_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.test_dir)

    def path(self, name):
        return os.path.join(self.test_dir, name)

    def test_params_for_isles(self):
        code, values = run(["params", "--config", "isles"])
        self.assertEqual(code, 0)
        params = int(values["params"])
        self.assertGreaterEqual(params, 0.75 * 10.5e6)
        self.assertLessEqual(params, 1.25 * 10.5e6)
        self.assertTrue(values["params_m"].endswith("M"))
        self.assertGreater(float(values["flops_per_voxel"]), 0)

    def test_eval_identical_masks(self):
        mask = torch.zeros(1, 8, 8, dtype=torch.float64)
        mask[0, 2:5, 3:6] = 1.0
        write_dct1(self.path("gt.dct1"), mask)
        code, values = run(["eval", "--pred", self.path("gt.dct1"), "--gt", self.path("gt.dct1"),
                            "--out", self.path("metrics.csv")])
        self.assertEqual(code, 0)
        self.assertEqual(float(values["dsc"]), 1.0)
        self.assertEqual(float(values["hd95"]), 0.0)
        self.assertTrue(os.path.exists(self.path("metrics.csv")))

    def test_eval_empty_prediction(self):
        mask = torch.zeros(1, 8, 8, dtype=torch.float64)
        mask[0, 4, 4] = 1.0
        write_dct1(self.path("gt.dct1"), mask)
        write_dct1(self.path("empty.dct1"), torch.zeros_like(mask))
        code, values = run(["eval", "--pred", self.path("empty.dct1"), "--gt", self.path("gt.dct1")])
        self.assertEqual(code, 0)
        self.assertEqual(float(values["dsc"]), 0.0)
        self.assertEqual(values["hd95"], "NA")

    def test_eval_spacing_must_match_rank(self):
        mask = torch.zeros(1, 8, 8, dtype=torch.float64)
        mask[0, 2:5, 3:6] = 1.0
        write_dct1(self.path("gt.dct1"), mask)
        code, _ = run(["eval", "--pred", self.path("gt.dct1"), "--gt", self.path("gt.dct1"),
                       "--spacing", "1", "1", "1"])
        self.assertEqual(code, 2)
        code, values = run(["eval", "--pred", self.path("gt.dct1"), "--gt", self.path("gt.dct1"),
                            "--spacing", "2", "1"])
        self.assertEqual(code, 0)
        self.assertEqual(float(values["hd95"]), 0.0)

    def test_eval_non_binary_mask(self):
        write_dct1(self.path("soft.dct1"), torch.full((1, 4, 4), 0.5, dtype=torch.float64))
        code, _ = run(["eval", "--pred", self.path("soft.dct1"), "--gt", self.path("soft.dct1")])
        self.assertEqual(code, 2)

    def test_predict_writes_maps_and_png(self):
        cfg = DeconverConfig(spatial_rank=2, in_channels=1, out_channels=1, depth=2, base_channels=4,
                             ndc=NdcLayerConfig(kernel=(3, 3)), patch=(8, 8))
        save_checkpoint(self.path("net.dcvw"), build_network(cfg, seed=0, dtype=torch.float64))
        write_dct1(self.path("image.dct1"), torch.rand(1, 16, 16, dtype=torch.float64))

        prefix = self.path("pred")
        code, values = run(["predict", "--checkpoint", self.path("net.dcvw"), "--image", self.path("image.dct1"),
                            "--out", prefix])
        self.assertEqual(code, 0)
        probs = read_dct1(f"{prefix}_prob.dct1")
        mask = read_dct1(f"{prefix}_mask.dct1")
        self.assertEqual(probs.shape, (1, 16, 16))
        self.assertTrue(torch.equal(mask, (probs > 0.5).to(mask.dtype)))
        self.assertEqual(float(values["foreground_fraction"]), float(mask.mean()))
        with Image.open(f"{prefix}_prob.png") as png:
            self.assertEqual(png.size, (16, 16))

    def test_predict_missing_checkpoint(self):
        write_dct1(self.path("image.dct1"), torch.rand(1, 8, 8, dtype=torch.float64))
        code, _ = run(["predict", "--checkpoint", self.path("absent.dcvw"), "--image", self.path("image.dct1"),
                       "--out", self.path("pred")])
        self.assertEqual(code, 3)


if __name__ == "__main__":
    unittest.main()
