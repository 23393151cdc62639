import math

import pandas as pd
from docx import Document

from config import RunConfig
from metrics import EvalReport
from report import ExperimentReportGenerator


def eval_report():
    row = {"seq_id": 0, "frames": 4, "ao": 0.5, "sr_050": 0.5, "sr_075": 0.25, "success_auc": 0.5,
           "precision_20px_equivalent": 0.75, "norm_precision": 0.5}
    return EvalReport(ao=0.5, sr_050=0.5, sr_075=0.25, success_auc=0.5,
                      precision_20px_equivalent=0.75, norm_precision=0.5,
                      n_sequences=1, n_frames=4, success_curve=[1.0] * 21, per_sequence=[row])


def table_texts(path):
    doc = Document(str(path))
    return [[cell.text for cell in row.cells] for table in doc.tables for row in table.rows]


def test_ablation_report(tmp_path):
    table = pd.DataFrame([
        {"variant": "baseline", "final_iou": 0.41, "ao": 0.38, "sr_050": 0.3, "epochs_to_iou_0_5": math.nan,
         "final_loss": 2.0},
        {"variant": "iv+lead", "final_iou": 0.62, "ao": 0.55, "sr_050": 0.6, "epochs_to_iou_0_5": 7.0,
         "final_loss": 1.1},
    ])
    variants = [("baseline", {"strategy": "one2one"}), ("iv+lead", {"strategy": "iv", "leading": True})]
    path = ExperimentReportGenerator(tmp_path).create_ablation_report(table, RunConfig(), variants)

    rows = table_texts(path)
    assert rows[0] == ["Variant", "Final train IoU", "AO", "SR 0.5", "Epochs to IoU 0.5"]
    assert rows[1] == ["baseline", "0.4100", "0.3800", "0.3000", "-"]
    assert rows[2][-1] == "7"
    paragraphs = [p.text for p in Document(path).paragraphs]
    assert "iv+lead: strategy=iv, leading=True" in paragraphs
    assert ["strategy", "iv"] in rows


def test_eval_report(tmp_path):
    path = ExperimentReportGenerator(tmp_path / "out").create_eval_report(eval_report(), "ckpt.json")
    rows = table_texts(path)
    assert ["ao", "0.5000"] in rows
    assert rows[-1][:2] == ["0", "4"]
    assert any("ckpt.json" in p.text for p in Document(path).paragraphs)
