//! Write a synthetic FCD log, parse it back, and show how each ego
//! trajectory is classified and encoded.
//!
//! cargo run --release --example fcd_ingest

use drivelab::imitation::{
    generate_merges, ingest, parse_fcd, write_fcd, EgoSelector, EncoderConfig, FilterConfig,
    MergeScenarioConfig,
};

fn main() -> drivelab::Result<()> {
    let log = generate_merges(&MergeScenarioConfig {
        count: 10,
        ..MergeScenarioConfig::default()
    })?;
    let xml = write_fcd(&log);
    println!("{} timesteps, {} bytes of XML", log.len(), xml.len());
    for line in xml.lines().take(6) {
        println!("  {line}");
    }

    let parsed = parse_fcd(&xml)?;
    assert_eq!(parsed, log);

    let selector = EgoSelector::parse("lane:ramp")?;
    let report = ingest(
        &parsed,
        &selector,
        None,
        &FilterConfig::default(),
        &EncoderConfig::default(),
    )?;
    for (id, verdict) in &report.verdicts {
        println!("{id:>8}: {verdict}");
    }
    if let Some(s) = report.samples.first() {
        println!(
            "{} has {} rows; first row {:?}",
            s.id,
            s.len(),
            s.features[0]
        );
    }

    match parse_fcd("<fcd-export>\n<timestep time=\"0\">\n<vehicle id=\"a\" x=\"?\" y=\"0\" speed=\"1\" angle=\"0\"/>\n</timestep>\n</fcd-export>") {
        Err(e) => println!("malformed input: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
