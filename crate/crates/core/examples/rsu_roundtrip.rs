//! Start a roadside unit on an ephemeral port, fetch its policy from inside
//! and outside the geofence, and run the fetched policy locally.
//!
//! cargo run --release --example rsu_roundtrip

use drivelab::imitation::{EncoderConfig, PolicyArtifact};
use drivelab::rnn::{ModelConfig, SeqModel};
use drivelab::rsu::{fetch, start_with, RsuConfig};

fn main() -> drivelab::Result<()> {
    let encoder = EncoderConfig::default();
    let model = SeqModel::new(ModelConfig::new(encoder.feature_dim(), 2))?;
    let artifact = PolicyArtifact::new(&model, encoder);

    let cfg = RsuConfig {
        bind: "127.0.0.1:0".into(),
        ..RsuConfig::default()
    };
    let server = start_with(&cfg, &artifact)?;
    let endpoint = server.local_addr().to_string();
    println!("RSU on {endpoint}, geofence {:?}", cfg.geofence);

    let (cx, cy) = cfg.geofence.center();
    let got = fetch(&endpoint, "cav-1", cx, cy, cfg.timeout())?.expect("inside the fence");
    let row = vec![vec![0.5; got.encoder.feature_dim()]; 3];
    println!(
        "inside: checksum {:08x}, same as served: {}, prediction {:?}",
        got.checksum,
        got == artifact,
        got.predict(&row)?.last()
    );

    let outside = fetch(
        &endpoint,
        "cav-2",
        cfg.geofence.x_max + 50.0,
        cy,
        cfg.timeout(),
    )?;
    println!("outside: {:?}", outside.map(|a| a.checksum));

    let stats = server.shutdown()?;
    println!(
        "served {} policies, {} outside",
        stats.policies, stats.outside
    );
    Ok(())
}
