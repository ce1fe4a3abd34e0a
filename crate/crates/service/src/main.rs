use critlab_service::{serve, AppState};
use tracing_subscriber::EnvFilter;

#[tokio::main]
async fn main() -> std::io::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();
    let addr = std::env::var("CRITLAB_ADDR").unwrap_or_else(|_| "127.0.0.1:8787".into());
    let max_jobs = std::env::var("CRITLAB_MAX_JOBS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(1);
    let listener = tokio::net::TcpListener::bind(&addr).await?;
    tracing::info!(addr = %listener.local_addr()?, max_jobs, "listening");
    serve(listener, AppState::new(max_jobs), async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await
}
