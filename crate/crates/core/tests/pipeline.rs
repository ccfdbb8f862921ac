//! Offline pipeline on the bundled CMDPs: file round trips, the RCB table
//! and its exact evaluation.

use std::path::{Path, PathBuf};

use pls_core::cmdp::{generate_dataset, Dataset, TabularBehavior, TabularCmdp};
use pls_core::harness::tabular::TabularProblem;
use pls_core::oracle::{exact_policy_value, exact_rcb_policy, load_ground_truth, save_ground_truth};
use pls_core::rcsl::{estimate_rcb_policy, evaluate_policy_mc, RcbPolicyTable, ReturnBinning};
use pls_core::safe_opt::Grid;
use pls_core::TargetReturn;

fn bundled() -> Vec<(PathBuf, TabularCmdp)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/cmdp");
    ["corridor", "patrol", "shortcut"]
        .iter()
        .map(|n| {
            let p = dir.join(format!("{n}.cmdp"));
            let c = TabularCmdp::load(&p).unwrap();
            (p, c)
        })
        .collect()
}

#[test]
fn bundled_cmdps_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    for (path, cmdp) in bundled() {
        let copy = tmp.path().join(path.file_name().unwrap());
        cmdp.save(&copy).unwrap();
        assert_eq!(TabularCmdp::load(&copy).unwrap(), cmdp);
        assert_eq!(cmdp.jitter, 0.0, "{} must be oracle-eligible", cmdp.name);
    }
}

#[test]
fn dataset_and_table_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, cmdp) = bundled().remove(1);
    let behavior = TabularBehavior::uniform(cmdp.horizon, cmdp.num_states, cmdp.num_actions);
    let data = generate_dataset(&cmdp, &behavior, "uniform", 300, 17).unwrap();
    data.save(&tmp.path().join("d.txt")).unwrap();
    let back = Dataset::load(&tmp.path().join("d.txt")).unwrap();
    assert_eq!(back, data);

    let binning = ReturnBinning::new(0.5, 0.5, cmdp.horizon as f64).unwrap();
    let table = estimate_rcb_policy(&back, binning).unwrap();
    assert_eq!(table, estimate_rcb_policy(&data, binning).unwrap());
    table.save(&tmp.path().join("t.txt")).unwrap();
    assert_eq!(RcbPolicyTable::load(&tmp.path().join("t.txt")).unwrap(), table);
}

#[test]
fn exact_values_agree_with_rollouts() {
    for (_, cmdp) in bundled() {
        let behavior = TabularBehavior::uniform(cmdp.horizon, cmdp.num_states, cmdp.num_actions);
        let binning = ReturnBinning::new(0.5, 0.5, cmdp.horizon as f64).unwrap();
        let table = exact_rcb_policy(&cmdp, &behavior, binning).unwrap();
        let h = cmdp.horizon as f64;
        for z in [TargetReturn::new(0.5 * h, 0.1 * h), TargetReturn::new(0.8 * h, 0.4 * h)] {
            let (jr, jg) = exact_policy_value(&cmdp, &table, z).unwrap();
            let mc = evaluate_policy_mc(&cmdp, &table, z, 20_000, 3).unwrap();
            assert!(
                (mc.j_r - jr).abs() <= 5.0 * mc.se_r + 1e-9,
                "{}: {} vs {jr}",
                cmdp.name,
                mc.j_r
            );
            assert!(
                (mc.j_g - jg).abs() <= 5.0 * mc.se_g + 1e-9,
                "{}: {} vs {jg}",
                cmdp.name,
                mc.j_g
            );
        }
    }
}

#[test]
fn prepared_problem_has_feasible_seed_and_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    for (_, cmdp) in bundled() {
        let h = cmdp.horizon as f64;
        let grid = Grid::lattice((0.0, h), 11, (0.0, h), 11).unwrap();
        let b = 0.4 * h;
        let binning = ReturnBinning::new(0.5, 0.5, h).unwrap();
        let p = TabularProblem::prepare(&cmdp, 500, binning, &grid, b, 9).unwrap();
        assert!(p.anchors.1 > p.anchors.0);
        assert!(p.ground_truth.is_feasible());
        assert!(p.ground_truth.points[p.seed_index].jg <= b, "{}", cmdp.name);
        let opt = p.ground_truth.optimum.unwrap();
        assert!(opt.jg <= b);
        assert!(p
            .ground_truth
            .points
            .iter()
            .filter(|q| q.jg <= b)
            .all(|q| q.jr <= opt.jr));

        let path = tmp.path().join(format!("{}.csv", cmdp.name));
        let header = vec![("master_seed".to_string(), "9".to_string())];
        save_ground_truth(&path, &header, &p.ground_truth.points).unwrap();
        assert!(std::fs::read_to_string(&path).unwrap().starts_with("# master_seed=9\n"));
        assert_eq!(load_ground_truth(&path).unwrap(), p.ground_truth.points);
    }
}
