mod common;

use aeroloop::config::PipelineConfig;
use aeroloop::mock_server::{router, MockRole};
use aeroloop::pipeline::{Pipeline, RunOptions, Stage};
use aeroloop_core::backends::http::{HttpBackend, HttpOptions};
use aeroloop_core::backends::{BackendError, Role, Trainer};
use common::{micro_config, spawn, write_corpus};

fn run_chain(config: PipelineConfig) -> (Pipeline, aeroloop::pipeline::RunSummary) {
    let p = Pipeline::open(config).unwrap();
    let out = p
        .run(&Stage::ALL, &RunOptions { auto_accept: true, iterations: Some(1) })
        .unwrap();
    (p, out)
}

#[test]
fn chain_over_http_matches_in_process_mocks() {
    let local_dir = tempfile::tempdir().unwrap();
    write_corpus(local_dir.path(), 6);
    let (local, local_out) = run_chain(micro_config(local_dir.path()));

    let remote_dir = tempfile::tempdir().unwrap();
    write_corpus(remote_dir.path(), 6);
    let mut config = micro_config(remote_dir.path());
    let dataset = config.dataset().unwrap();
    config.backends.generator = spawn(router(MockRole::generator()));
    config.backends.critic = spawn(router(MockRole::critic(config.backends.mock_seed)));
    config.backends.trainer = spawn(router(MockRole::trainer(&dataset)));
    config.backends.embedder = spawn(router(MockRole::embedder(config.eval.target_frames)));
    let (remote, remote_out) = run_chain(config);

    let (a, b) = (local_out.annotate.unwrap(), remote_out.annotate.unwrap());
    assert_eq!(a.summary, b.summary);
    let read = |p: &Pipeline, v| p.dataset.manifests().read(v).unwrap().content_digest();
    assert_eq!(read(&local, a.manifest_version.unwrap()), read(&remote, b.manifest_version.unwrap()));

    let (a, b) = (&local_out.selfplay.unwrap()[0], &remote_out.selfplay.unwrap()[0]);
    assert_eq!(a.model_after, b.model_after);
    assert_eq!(a.job_outcome, b.job_outcome);
    assert_eq!(local.selfplay_driver().tables(0).unwrap(), remote.selfplay_driver().tables(0).unwrap());

    let (a, b) = (local_out.eval.unwrap().report, remote_out.eval.unwrap().report);
    assert_eq!(a.rows, b.rows);
}

#[test]
fn handshake_checks_the_role() {
    let url = spawn(router(MockRole::generator()));
    let backend = HttpBackend::new(&url, HttpOptions::default()).unwrap();
    assert_eq!(backend.handshake(Role::Generator).unwrap().role, Role::Generator);
    assert!(matches!(
        backend.handshake(Role::Critic),
        Err(BackendError::RoleMismatch { expected: Role::Critic, got: Role::Generator })
    ));
    // Pipeline start-up fails fast on a misconfigured endpoint.
    let dir = tempfile::tempdir().unwrap();
    let mut config = micro_config(dir.path());
    config.backends.critic = url;
    assert!(Pipeline::open(config).is_err());
}

#[test]
fn unknown_train_job_maps_to_its_own_error() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = micro_config(dir.path()).dataset().unwrap();
    let url = spawn(router(MockRole::trainer(&dataset)));
    let backend = HttpBackend::new(&url, HttpOptions::default()).unwrap();
    assert!(matches!(backend.poll("job-missing"), Err(BackendError::UnknownJob(id)) if id == "job-missing"));
    // A role the server does not play is a remote error, not a crash.
    let err = aeroloop_core::backends::Generator::generate(
        &backend,
        &aeroloop_core::backends::GenerateRequest {
            observation: aeroloop_core::FrameTensor::filled(4, 4, [0, 0, 0]).unwrap(),
            prompt: "move forward".into(),
            seed: 0,
            num_frames: 2,
            height: 4,
            width: 4,
            model_id: None,
        },
    )
    .unwrap_err();
    assert!(matches!(err, BackendError::Remote { status: 400, .. }), "{err}");
}
