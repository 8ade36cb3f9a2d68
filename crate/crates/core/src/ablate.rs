//! Ablation grids: train and evaluate one model per cell.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::metrics::MetricsReport;
use crate::model::{Modules, RegionProfile};
use crate::train::{train, TrainConfig};

/// Overrides applied to the base configuration; unset fields keep the base.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Cell {
    pub name: Option<String>,
    pub heads: Option<usize>,
    pub layers: Option<usize>,
    pub residual: Option<bool>,
    pub modules: Option<Modules>,
    pub region_profile: Option<RegionProfile>,
}

/// Values to cross; an empty axis keeps the base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Axes {
    pub heads: Vec<usize>,
    pub layers: Vec<usize>,
    pub residual: Vec<bool>,
    pub modules: Vec<Modules>,
    pub region_profile: Vec<RegionProfile>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub axes: Option<Axes>,
    pub cells: Vec<Cell>,
}

fn opts<T: Copy>(v: &[T]) -> Vec<Option<T>> {
    if v.is_empty() {
        vec![None]
    } else {
        v.iter().copied().map(Some).collect()
    }
}

impl GridSpec {
    /// Explicit cells first, then the cartesian product of the axes.
    pub fn expand(&self) -> Vec<Cell> {
        let mut out = self.cells.clone();
        if let Some(a) = &self.axes {
            for modules in opts(&a.modules) {
                for region_profile in opts(&a.region_profile) {
                    for residual in opts(&a.residual) {
                        for layers in opts(&a.layers) {
                            for heads in opts(&a.heads) {
                                out.push(Cell {
                                    name: None,
                                    heads,
                                    layers,
                                    residual,
                                    modules,
                                    region_profile,
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Single modules, residual on/off and the two region profiles.
    pub fn table4() -> Self {
        let cell = |name: &str, modules, residual, region_profile| Cell {
            name: Some(name.to_string()),
            modules: Some(modules),
            residual: Some(residual),
            region_profile: Some(region_profile),
            ..Cell::default()
        };
        use Modules::*;
        use RegionProfile::*;
        GridSpec {
            axes: None,
            cells: vec![
                cell("find", Find, true, Object),
                cell("find-grid", Find, true, Grid),
                cell("refer", Refer, false, Object),
                cell("refer+res", Refer, true, Object),
                cell("refer+find-grid", Both, false, Grid),
                cell("refer+res+find-grid", Both, true, Grid),
                cell("refer+find", Both, false, Object),
                cell("refer+res+find", Both, true, Object),
            ],
        }
    }

    /// Heads 1 to 64 against stacks of 1 to 4 layers.
    pub fn fig3() -> Self {
        GridSpec {
            axes: Some(Axes {
                heads: vec![1, 2, 4, 8, 16, 32, 64],
                layers: vec![1, 2, 3, 4],
                ..Axes::default()
            }),
            cells: Vec::new(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "table4" => Ok(GridSpec::table4()),
            "fig3" => Ok(GridSpec::fig3()),
            other => Err(Error::usage(format!("unknown preset `{other}` (expected table4 or fig3)"))),
        }
    }
}

impl Cell {
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        let m = &mut c.model;
        if let Some(h) = self.heads {
            m.heads = h;
        }
        if let Some(l) = self.layers {
            m.layers = l;
        }
        if let Some(r) = self.residual {
            m.residual = r;
        }
        if let Some(x) = self.modules {
            m.modules = x;
        }
        if let Some(p) = self.region_profile {
            m.region_profile = p;
        }
        c
    }

    pub fn label(&self, base: &TrainConfig) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        let m = self.apply(base).model;
        let modules = serde_json::to_value(m.modules).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
        let profile = serde_json::to_value(m.region_profile)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        format!(
            "{modules}-h{}-l{}-{}-{profile}",
            m.heads,
            m.layers,
            if m.residual { "res" } else { "nores" }
        )
    }
}

pub struct CellResult {
    pub label: String,
    pub config: TrainConfig,
    pub outcome: Result<MetricsReport>,
}

pub fn run_cell(base: &TrainConfig, cell: &Cell, train_data: &Dataset, eval_data: &Dataset) -> CellResult {
    let config = cell.apply(base);
    let outcome = train(&config, train_data, None, None)
        .and_then(|t| evaluate(&t.model, eval_data))
        .map(|e| e.report);
    CellResult {
        label: cell.label(base),
        config,
        outcome,
    }
}

/// Runs every cell (in parallel) with the shared base seed. A failing cell is
/// reported in its row and does not stop the grid.
pub fn run_grid(base: &TrainConfig, spec: &GridSpec, train_data: &Dataset, eval_data: &Dataset) -> Vec<CellResult> {
    spec.expand()
        .par_iter()
        .map(|cell| run_cell(base, cell, train_data, eval_data))
        .collect()
}

pub const CSV_HEADER: [&str; 17] = [
    "cell",
    "modules",
    "heads",
    "layers",
    "residual",
    "region_profile",
    "status",
    "n",
    "ndcg",
    "mrr",
    "r1",
    "r5",
    "r10",
    "mean_rank",
    "sc_mrr",
    "si_mrr",
    "error",
];

fn word<T: Serialize>(x: T) -> String {
    serde_json::to_value(x)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

impl CellResult {
    pub fn record(&self) -> Vec<String> {
        let m = &self.config.model;
        let mut row = vec![
            self.label.clone(),
            word(m.modules),
            m.heads.to_string(),
            m.layers.to_string(),
            m.residual.to_string(),
            word(m.region_profile),
        ];
        match &self.outcome {
            Ok(r) => {
                let o = &r.overall;
                row.push("ok".into());
                row.extend([
                    o.n.to_string(),
                    o.ndcg.map(|x| x.to_string()).unwrap_or_default(),
                    o.mrr.to_string(),
                    o.r1.to_string(),
                    o.r5.to_string(),
                    o.r10.to_string(),
                    o.mean_rank.to_string(),
                    r.sc.as_ref().map(|x| x.mrr.to_string()).unwrap_or_default(),
                    r.si.as_ref().map(|x| x.mrr.to_string()).unwrap_or_default(),
                    String::new(),
                ]);
            }
            Err(e) => {
                row.push("error".into());
                row.extend(std::iter::repeat_n(String::new(), 9));
                row.push(format!("{}: {e}", e.kind()));
            }
        }
        row
    }
}

pub fn write_csv(path: &Path, results: &[CellResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CSV_HEADER)?;
    for r in results {
        w.write_record(r.record())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heads_by_residual_gives_two_cells() {
        let spec: GridSpec = serde_json::from_str(r#"{"axes": {"heads": [1], "layers": [1], "residual": [true, false]}}"#).unwrap();
        let cells = spec.expand();
        assert_eq!(cells.len(), 2);
        let base = TrainConfig::default();
        assert_eq!(cells[1].apply(&base).model.residual, false);
        assert_eq!(cells[0].label(&base), "both-h1-l1-res-object");
    }

    #[test]
    fn presets_cover_the_axes() {
        assert_eq!(GridSpec::fig3().expand().len(), 28);
        let t4 = GridSpec::table4().expand();
        assert_eq!(t4.len(), 8);
        let base = TrainConfig::default();
        let configs: Vec<_> = t4.iter().map(|c| c.apply(&base).model).collect();
        for modules in [Modules::Find, Modules::Refer, Modules::Both] {
            assert!(configs.iter().any(|m| m.modules == modules));
        }
        assert!(configs.iter().any(|m| m.modules == Modules::Both && !m.residual));
        assert!(configs.iter().any(|m| m.region_profile == RegionProfile::Grid));
        assert!(GridSpec::preset("table5").is_err());
    }
}
