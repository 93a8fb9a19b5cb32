mod common;

#[test]
fn kuramoto_integration_converges_to_rk4_oracle() {
    common::assert_all(&common::ode::convergence_suite());
}
