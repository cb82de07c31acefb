import json
import math

import numpy as np
import torch

from caflow.backbone import FlowResNet
from caflow.costmodel import exit_costs
from caflow.evaluation import evaluate, evaluate_image
from caflow.flow import single_step_infer
from caflow.imaging import psnr, quantize_8bit, ssim
from caflow.routing import oracle_label
from conftest import MINI, perturb


def _model():
    torch.manual_seed(0)
    return perturb(FlowResNet(MINI), 0.1).eval()


def test_exit_outputs_match_forced_inference():
    model = _model()
    hr = torch.rand(3, 16, 16)
    rec = evaluate_image(model, hr)
    lr = torch.nn.functional.avg_pool2d(hr.unsqueeze(0), 2)[0]
    rec_lr = evaluate_image(model, hr, lr)
    for e in range(4):
        out = quantize_8bit(single_step_infer(model, lr, exit=e))
        assert abs(rec_lr.exit_psnr[e] - psnr(out, hr)) < 1e-9
        assert abs(rec_lr.exit_ssim[e] - ssim(out, hr)) < 1e-9
    assert rec.oracle == oracle_label(rec.exit_losses)
    assert rec_lr.predicted == single_step_infer(model, lr, return_bundle=True)[1].chosen_exit


def test_aggregates_equal_mean_of_records():
    model = _model()
    hrs = [torch.rand(3, 16, 16, generator=torch.Generator().manual_seed(i)) for i in range(4)]
    report = evaluate(model, hrs)
    recs = report.records
    for e in range(4):
        assert abs(report.summary["exit_psnr"][e] - np.mean([r.exit_psnr[e] for r in recs])) < 1e-9
    assert abs(report.summary["adaptive_psnr"] - np.mean([r.exit_psnr[r.predicted] for r in recs])) < 1e-9
    assert sum(report.histogram) == 4
    table = exit_costs(model.config, 8, 8)
    assert abs(report.expected_flops - np.mean([table.per_exit[r.predicted] for r in recs])) < 1e-3
    assert report.full_flops == table.per_exit[3]
    json.dumps(report.to_dict(), allow_nan=False)


def test_mixed_sizes_charge_each_image_its_own_cost():
    model = _model()
    hrs = [torch.rand(3, 16, 16), torch.rand(3, 32, 16)]
    report = evaluate(model, hrs)
    costs = [exit_costs(model.config, 8, 8), exit_costs(model.config, 16, 8)]
    want = np.mean([c.per_exit[r.predicted] for c, r in zip(costs, report.records)])
    assert abs(report.expected_flops - want) < 1e-3


def test_identical_images_report_null_psnr():
    model = FlowResNet(MINI).eval()
    lr = torch.full((3, 8, 8), 128 / 255)
    hr = torch.full((3, 16, 16), 128 / 255)
    report = evaluate(model, [hr], [lr])
    d = report.to_dict()
    img = d["images"][0]
    assert img["psnr_infinite"] is True and img["bicubic"]["psnr"] is None
    assert all(x["psnr"] is None for x in img["exits"]) and img["exits"][0]["ssim"] == 1.0
    assert d["summary"]["bicubic_psnr"] is None
    json.dumps(d, allow_nan=False)
    assert math.isinf(report.records[0].bicubic_psnr)
