mod common;

use common::fuzz::non_interference;

#[tokio::test]
async fn uncleared_probes_never_see_secret_bytes_or_tags() {
    let env = common::env();
    let report = non_interference(&env, 10_000, 4).await;
    assert_eq!(report.probes, 10_000);
    assert!(report.leaks.is_empty(), "{:#?}", &report.leaks[..report.leaks.len().min(20)]);
    // The probes must actually exercise success and denial paths alike.
    for code in [200, 202, 401, 403, 404, 422] {
        assert!(report.statuses.get(&code).copied().unwrap_or(0) > 0, "no {code} in {:?}", report.statuses);
    }
}
