#include <catch2/catch_amalgamated.hpp>

#include "across/metrics.hpp"
#include "test_support.hpp"

using namespace across;
using namespace across::metrics;

TEST_CASE("deformation mask") {
  Eigen::MatrixXd ref = testsup::random_matrix(10, 3, 1, 2.0);

  SECTION("identical meshes give an empty mask") {
    auto m = deformation_mask(ref, ref);
    CHECK(m.count() == 0);
  }
  SECTION("threshold is inclusive at exactly 10 um") {
    Eigen::MatrixXd gt = ref;
    gt(3, 0) += 10.0 / 1000.0;  // exactly 10 um in mm
    auto m = deformation_mask(gt, ref);
    CHECK(m.count() == 1);
    CHECK(m.selected[3]);
  }
  SECTION("5 um stays below the threshold") {
    Eigen::MatrixXd gt = ref;
    gt(3, 0) += 5.0 / 1000.0;
    auto m = deformation_mask(gt, ref);
    CHECK(m.count() == 0);
  }
  SECTION("topology mismatch is rejected") {
    Eigen::MatrixXd other = testsup::random_matrix(9, 3, 2);
    CHECK_THROWS_MATCHES(deformation_mask(other, ref), Error,
                         Catch::Matchers::Predicate<Error>(
                             [](const Error& e) { return e.code() == Errc::topology_mismatch; }));
  }
}

TEST_CASE("mesh rmse") {
  Eigen::MatrixXd a = testsup::random_matrix(12, 3, 3, 1.5);

  SECTION("identical meshes score zero") { CHECK(mesh_rmse_um(a, a) == 0.0); }

  SECTION("single selected vertex offset (3,0,4) um") {
    Eigen::MatrixXd b = a;
    b(5, 0) += 3.0 / 1000.0;
    b(5, 2) += 4.0 / 1000.0;
    std::vector<bool> only(12, false);
    only[5] = true;
    CHECK(mesh_rmse_um(b, a, &only) == Catch::Approx(std::sqrt(25.0 / 3.0)).epsilon(1e-9));
  }
  SECTION("matches the brute-force double loop") {
    Eigen::MatrixXd b = a + testsup::random_matrix(12, 3, 4, 0.01);
    double total = 0.0;
    for (int v = 0; v < 12; ++v)
      for (int c = 0; c < 3; ++c) total += std::pow(b(v, c) - a(v, c), 2);
    double expect = std::sqrt(total / (3.0 * 12.0)) * 1000.0;
    CHECK(mesh_rmse_um(b, a) == Catch::Approx(expect).epsilon(1e-9));
  }
  SECTION("empty mask is rejected") {
    std::vector<bool> none(12, false);
    CHECK_THROWS_MATCHES(mesh_rmse_um(a, a, &none), Error,
                         Catch::Matchers::Predicate<Error>(
                             [](const Error& e) { return e.code() == Errc::empty_mask; }));
  }
}

TEST_CASE("mesh euclidean distance") {
  Eigen::MatrixXd a = testsup::random_matrix(8, 3, 5, 1.0);

  SECTION("identical meshes score zero") { CHECK(mesh_euclidean_um(a, a) == 0.0); }

  SECTION("3-4-5 triangle gives 5 um") {
    Eigen::MatrixXd b = a;
    b(2, 0) += 3.0 / 1000.0;
    b(2, 2) += 4.0 / 1000.0;
    std::vector<bool> only(8, false);
    only[2] = true;
    CHECK(mesh_euclidean_um(b, a, &only) == Catch::Approx(5.0).epsilon(1e-9));
  }
  SECTION("matches the brute-force loop") {
    Eigen::MatrixXd b = a + testsup::random_matrix(8, 3, 6, 0.02);
    double total = 0.0;
    for (int v = 0; v < 8; ++v) total += (b.row(v) - a.row(v)).norm();
    CHECK(mesh_euclidean_um(b, a) == Catch::Approx(total / 8.0 * 1000.0).epsilon(1e-9));
  }
}

TEST_CASE("metrics are permutation invariant") {
  Eigen::MatrixXd a = testsup::random_matrix(15, 3, 7, 1.0);
  Eigen::MatrixXd b = a + testsup::random_matrix(15, 3, 8, 0.02);
  std::vector<int> perm(15);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 gen(9);
  std::shuffle(perm.begin(), perm.end(), gen);
  Eigen::MatrixXd ap(15, 3), bp(15, 3);
  for (int v = 0; v < 15; ++v) {
    ap.row(v) = a.row(perm[static_cast<std::size_t>(v)]);
    bp.row(v) = b.row(perm[static_cast<std::size_t>(v)]);
  }
  CHECK(mesh_rmse_um(bp, ap) == Catch::Approx(mesh_rmse_um(b, a)).epsilon(1e-12));
  CHECK(mesh_euclidean_um(bp, ap) == Catch::Approx(mesh_euclidean_um(b, a)).epsilon(1e-12));
}

TEST_CASE("metric over the full set combines region and complement") {
  Eigen::MatrixXd ref = testsup::random_matrix(30, 3, 10, 1.0);
  Eigen::MatrixXd gt = ref;
  for (int v = 0; v < 10; ++v) gt(v, 1) += 0.05;  // 50 um region
  Eigen::MatrixXd pred = gt + testsup::random_matrix(30, 3, 11, 0.01);

  auto mask = deformation_mask(gt, ref);
  std::vector<bool> complement(30);
  for (int v = 0; v < 30; ++v) complement[static_cast<std::size_t>(v)] = !mask.selected[static_cast<std::size_t>(v)];
  const auto n_r = static_cast<double>(mask.count());
  const double n_c = 30.0 - n_r;

  double rmse_all = mesh_rmse_um(pred, gt);
  double rmse_r = mesh_rmse_um(pred, gt, &mask.selected);
  double rmse_c = mesh_rmse_um(pred, gt, &complement);
  double combined = std::sqrt((n_r * rmse_r * rmse_r + n_c * rmse_c * rmse_c) / 30.0);
  CHECK(rmse_all == Catch::Approx(combined).epsilon(1e-9));

  double euc_all = mesh_euclidean_um(pred, gt);
  double euc_r = mesh_euclidean_um(pred, gt, &mask.selected);
  double euc_c = mesh_euclidean_um(pred, gt, &complement);
  CHECK(euc_all == Catch::Approx((n_r * euc_r + n_c * euc_c) / 30.0).epsilon(1e-9));
}

TEST_CASE("signal rmse") {
  signal::FrameSeq a, b;
  for (int i = 0; i < 5; ++i) {
    signal::SignalFrame f;
    for (int c = 0; c < signal::kNumElectrodes; ++c) f.electrodes[c] = 0.1 * c - 0.5;
    f.timestamp_index = i;
    a.push_back(f);
    b.push_back(f);
  }
  CHECK(signal_rmse(a, b) == 0.0);

  for (auto& f : b)
    for (auto& e : f.electrodes) e += 0.1;
  CHECK(signal_rmse(b, a) == Catch::Approx(0.1).epsilon(1e-12));
  auto per_frame = signal_rmse_per_frame(b, a);
  for (double v : per_frame) CHECK(v == Catch::Approx(0.1).epsilon(1e-12));

  signal::FrameSeq shorter(a.begin(), a.begin() + 3);
  CHECK_THROWS_MATCHES(signal_rmse(shorter, a), Error,
                       Catch::Matchers::Predicate<Error>(
                           [](const Error& e) { return e.code() == Errc::length_mismatch; }));
}

TEST_CASE("report emission") {
  SECTION("zero row formats as 0.00 (0.00)") {
    EvalReport r;
    r.rows.push_back({"MVB", {}, {}, {}, {}});
    auto text = report_to_text(r);
    CHECK(text.find("0.00 (0.00)") != std::string::npos);
  }
  SECTION("paper-style values format verbatim") {
    EvalReport r;
    EvalRow row;
    row.network = "S2MPN";
    row.rmse_all = {78.21, 41.88, 100};
    row.euc_all = {85.00, 49.80, 100};
    row.rmse_region = {94.07, 48.32, 100};
    row.euc_region = {121.02, 62.31, 100};
    r.rows.push_back(row);
    auto text = report_to_text(r);
    CHECK(text.find("78.21 (41.88)") != std::string::npos);
    CHECK(text.find("85.00 (49.80)") != std::string::npos);
    CHECK(text.find("94.07 (48.32)") != std::string::npos);
    CHECK(text.find("121.02 (62.31)") != std::string::npos);
  }
  SECTION("CSV re-parse reproduces the emitted values") {
    EvalReport r;
    EvalRow row;
    row.network = "MVD";
    row.rmse_all = {9.275550123, 4.2012345, 17};
    row.euc_all = {10.13, 3.98, 17};
    row.rmse_region = {12.43, 3.93, 17};
    row.euc_region = {14.6, 4.15, 17};
    r.rows.push_back(row);
    auto csv = report_to_csv(r);
    std::istringstream in(csv);
    std::string line;
    std::getline(in, line);
    CHECK(line == "network,metric,scope,mean_um,std_um");
    std::getline(in, line);
    auto cells = split(line, ',');
    REQUIRE(cells.size() == 5);
    CHECK(cells[0] == "MVD");
    CHECK(parse_double(cells[3], "test") == row.rmse_all.mean);
    CHECK(parse_double(cells[4], "test") == row.rmse_all.std);
  }
  SECTION("aggregate of a single value has zero std") {
    auto a = aggregate({3.5});
    CHECK(a.mean == 3.5);
    CHECK(a.std == 0.0);
    CHECK(a.n == 1);
  }
}
