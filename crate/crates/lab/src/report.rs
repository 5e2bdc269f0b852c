//! CSV encodings of training curves, evaluation results and ablation traces.
//! Rows are emitted in a fixed order and floats in shortest round-trip form,
//! so identical runs produce identical bytes.

use forcegain_core::seqmodel::{head_label, ModelKind, TrainReport};
use forcegain_core::transfer::{AblationReport, CellSummary, EpisodeMetrics, EvalReport};

const AXES: [&str; 3] = ["x", "z", "theta"];

fn axis_name(i: usize) -> String {
    AXES.get(i).map(|s| s.to_string()).unwrap_or_else(|| format!("a{i}"))
}

fn num(v: f64) -> String {
    format!("{v}")
}

struct Table {
    writer: csv::Writer<Vec<u8>>,
}

impl Table {
    fn new(header: &[String]) -> Self {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record(header).expect("in-memory write");
        Table { writer }
    }

    fn row(&mut self, cells: &[String]) {
        self.writer.write_record(cells).expect("in-memory write");
    }

    fn finish(self) -> Vec<u8> {
        self.writer.into_inner().expect("in-memory flush")
    }
}

fn strings(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

/// Held-out losses of each model at one point of training.
#[derive(Clone, Debug)]
pub struct HeldOut {
    pub step: u64,
    /// Per model, per head.
    pub losses: Vec<Vec<f64>>,
}

/// Loss curve of models trained together. `initial` is scored before the
/// first update; its training columns hold the loss on training rows and
/// an empty gradient norm.
pub struct LossCurve {
    kinds: Vec<(ModelKind, Vec<&'static str>)>,
    rows: Vec<Vec<String>>,
}

impl LossCurve {
    pub fn new(kinds: Vec<(ModelKind, Vec<&'static str>)>) -> Self {
        LossCurve { kinds, rows: Vec::new() }
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["step".to_string()];
        for (kind, heads) in &self.kinds {
            h.push(format!("{}_loss", kind.name()));
            h.extend(heads.iter().map(|head| head_label(*kind, head)));
            h.push(format!("{}_grad_norm", kind.name()));
        }
        for (kind, heads) in &self.kinds {
            h.push(format!("heldout_{}_loss", kind.name()));
            h.extend(heads.iter().map(|head| format!("heldout_{}", head_label(*kind, head))));
        }
        h
    }

    fn push_held(row: &mut Vec<String>, held: &HeldOut) {
        for losses in &held.losses {
            row.push(num(losses.iter().sum()));
            row.extend(losses.iter().map(|l| num(*l)));
        }
    }

    pub fn initial(&mut self, train: &HeldOut, held: &HeldOut) {
        let mut row = vec![train.step.to_string()];
        for losses in &train.losses {
            row.push(num(losses.iter().sum()));
            row.extend(losses.iter().map(|l| num(*l)));
            row.push(String::new());
        }
        Self::push_held(&mut row, held);
        self.rows.push(row);
    }

    pub fn push(&mut self, report: &TrainReport, held: &HeldOut) {
        let mut row = vec![report.step.to_string()];
        for m in &report.models {
            row.push(num(m.loss));
            row.extend(m.head_losses.iter().map(|l| num(*l)));
            row.push(num(m.grad_norm));
        }
        Self::push_held(&mut row, held);
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_csv(&self) -> Vec<u8> {
        let mut t = Table::new(&self.header());
        for r in &self.rows {
            t.row(r);
        }
        t.finish()
    }
}

fn sorted_cells(report: &EvalReport) -> Vec<&CellSummary> {
    let mut cells: Vec<&CellSummary> = report.cells.iter().collect();
    cells.sort_by(|a, b| (&a.policy, &a.preset).cmp(&(&b.policy, &b.preset)));
    cells
}

pub fn success_matrix_csv(report: &EvalReport) -> Vec<u8> {
    let dof = report.cells.first().map(|c| c.rmse.len()).unwrap_or(3);
    let mut header = strings(&["policy", "preset", "episodes", "success_rate", "mean_return", "contact_steps"]);
    header.extend((0..dof).map(|i| format!("rmse_{}", axis_name(i))));
    header.push("rmse_norm".into());
    let mut t = Table::new(&header);
    for c in sorted_cells(report) {
        let mut row = vec![
            c.policy.clone(),
            c.preset.clone(),
            c.episodes.to_string(),
            num(c.success_rate),
            num(c.mean_return),
            c.contact_steps.to_string(),
        ];
        row.extend(c.rmse.iter().map(|v| num(*v)));
        row.push(num(c.rmse_norm));
        t.row(&row);
    }
    t.finish()
}

pub fn episodes_csv(report: &EvalReport) -> Vec<u8> {
    let dof = report.episodes.first().map(|e| e.rmse.len()).unwrap_or(3);
    let mut header =
        strings(&["policy", "preset", "seed", "episode", "success", "steps", "return", "contact_steps"]);
    header.extend((0..dof).map(|i| format!("rmse_{}", axis_name(i))));
    header.push("peak_force".into());
    let mut t = Table::new(&header);
    let mut eps: Vec<&EpisodeMetrics> = report.episodes.iter().collect();
    eps.sort_by(|a, b| (&a.policy, &a.preset, a.seed, a.episode).cmp(&(&b.policy, &b.preset, b.seed, b.episode)));
    for e in eps {
        let mut row = vec![
            e.policy.clone(),
            e.preset.clone(),
            e.seed.to_string(),
            e.episode.to_string(),
            u8::from(e.success).to_string(),
            e.steps.to_string(),
            num(e.episode_return),
            e.contact_steps.to_string(),
        ];
        row.extend(e.rmse.iter().map(|v| num(*v)));
        row.push(num(e.peak_force));
        t.row(&row);
    }
    t.finish()
}

pub fn ablation_traces_csv(report: &AblationReport) -> Vec<u8> {
    let mut t = Table::new(&strings(&["factor", "seed", "t", "f_z_actual", "f_z_desired", "k_z"]));
    for tr in &report.traces {
        for s in &tr.steps {
            t.row(&[num(tr.factor), tr.seed.to_string(), s.t.to_string(), num(s.f_z_actual), num(s.f_z_desired), num(s.k_z)]);
        }
    }
    t.finish()
}

pub fn ablation_summary_csv(report: &AblationReport) -> Vec<u8> {
    let mut t = Table::new(&strings(&["factor", "mean_abs_fz", "mean_kz", "contact_steps", "success_rate"]));
    for s in &report.summary {
        t.row(&[num(s.factor), num(s.mean_abs_fz), num(s.mean_kz), s.contact_steps.to_string(), num(s.success_rate)]);
    }
    t.finish()
}

/// One stage of the fine-tuning comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneStage {
    pub stage: &'static str,
    pub preset: String,
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_return: f64,
    /// Planner head losses on the held-out shifted trajectories (motion, force).
    pub heldout: Vec<f64>,
}

pub fn finetune_summary_csv(stages: &[FinetuneStage]) -> Vec<u8> {
    let mut t = Table::new(&strings(&[
        "stage",
        "preset",
        "episodes",
        "success_rate",
        "mean_return",
        "heldout_fp_dx",
        "heldout_fp_f",
    ]));
    for s in stages {
        let mut row = vec![s.stage.to_string(), s.preset.clone(), s.episodes.to_string(), num(s.success_rate), num(s.mean_return)];
        row.extend(s.heldout.iter().map(|v| num(*v)));
        t.row(&row);
    }
    t.finish()
}

/// Parse a CSV produced here into a header and string rows.
pub fn parse_csv(bytes: &[u8]) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_reader(bytes);
    let header = r.headers().map(|h| h.iter().map(String::from).collect()).unwrap_or_default();
    let rows = r.records().filter_map(|rec| rec.ok()).map(|rec| rec.iter().map(String::from).collect()).collect();
    (header, rows)
}
