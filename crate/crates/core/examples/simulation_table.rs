//! A small Monte Carlo study rendered as a markdown table.
//! Usage: `simulation_table [n] [replicates]`.

use labelshift::estimators::Estimand;
use labelshift::simulation::{emit_table, run_study, EstimatorId, SimConfig, TableFormat};

fn main() -> labelshift::Result<()> {
    let mut args = std::env::args().skip(1);
    let n = args.next().map_or(Ok(500), |v| v.parse()).expect("n must be an integer");
    let replicates = args.next().map_or(Ok(20), |v| v.parse()).expect("replicates must be an integer");
    let config = SimConfig {
        n,
        replicates,
        estimators: EstimatorId::parse_list("sd-mis,df-mis,sf-mis,oracle")?,
        estimands: vec![Estimand::Mean],
        ..Default::default()
    };
    let study = run_study(&config)?;
    print!("{}", emit_table(&study.rows, TableFormat::Markdown));
    Ok(())
}
