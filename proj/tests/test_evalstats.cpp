#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "ignitrace/evalstats.hpp"
#include "support.hpp"

using namespace ignitrace;
using namespace ignitrace::eval;

namespace {

ParticleTrack track_from(std::vector<double> ys) {
  ParticleTrack t;
  t.event_id = "t";
  for (std::size_t k = 0; k < ys.size(); ++k) t.entries.push_back({static_cast<int>(k), 10.0, ys[k], 100.0, true});
  return t;
}

double two_pass_sd(const std::vector<double>& v) {
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

// Track falling one pixel per frame from y=0, pitch 100 um, so y_ref 1.5 mm is
// 15 px and the reference frame is 15.
ReportInput synthetic_input(int n_events) {
  ReportInput in;
  for (int i = 0; i < n_events; ++i) {
    const std::string id = "ev" + std::to_string(i);
    std::vector<double> ys;
    for (int k = 0; k < 100; ++k) ys.push_back(k);
    EventInfo info{{i % 2 ? Atmosphere::AIR10 : Atmosphere::OXY20, i % 3 ? SizeClass::A : SizeClass::B},
                   track_from(ys), 10000.0, 100.0};
    info.track.event_id = id;
    in.events[id] = info;
    in.labels[id] = GroundTruthLabel{id, 40 + i % 5, "t", 0};
    in.detections.push_back({id, "sas", 40 + i % 5 + (i % 3)});
    in.detections.push_back({id, "net", 40 + i % 5});
  }
  return in;
}

}  // namespace

TEST_SUITE("evalstats") {
  TEST_CASE("reference frame interpolation") {
    CHECK(reference_frame(track_from({0.5, 1.0, 1.5, 2.0}), 2.0) == 3.0);
    CHECK(reference_frame(track_from({0.5, 1.0, 1.5, 2.0}), 1.25) == doctest::Approx(1.5));
    CHECK(reference_frame(track_from({1.4, 1.6}), 1.5) == doctest::Approx(0.5));
    CHECK_THROWS_AS(reference_frame(track_from({0.1, 0.2, 0.3}), 5.0), EvalError);

    auto gapped = track_from({0.0, 1.0, 2.0, 3.0});
    gapped.entries[1].valid = false;
    gapped.entries[2].valid = false;
    CHECK(reference_frame(gapped, 1.5) == doctest::Approx(1.5));
  }

  TEST_CASE("ignition delay and ITD") {
    CHECK(ignition_delay_ms(52, 2.0, 10000) == doctest::Approx(5.0));
    CHECK(itd(12.3, 10.3) == doctest::Approx(2.0));
    CHECK(itd(10.3, 12.3) == doctest::Approx(-2.0));
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(-50, 50);
    for (int i = 0; i < 200; ++i) {
      const double a = u(rng), b = u(rng), s = u(rng);
      CHECK(itd(a, b) == -itd(b, a));
      CHECK(itd(a + s, b + s) == doctest::Approx(itd(a, b)).epsilon(1e-12));
      const double f1 = 10 + std::abs(u(rng)), f2 = 10 + std::abs(u(rng)), ref = std::abs(u(rng)) / 10;
      CHECK(itd(ignition_delay_ms(f1, ref, 10000), ignition_delay_ms(f2, ref, 10000)) ==
            doctest::Approx((f1 - f2) / 10.0).epsilon(1e-9));
    }
    CHECK_THROWS(ignition_delay_ms(1, 0, 0));
  }

  TEST_CASE("condition statistics") {
    const Condition c{Atmosphere::AIR10, SizeClass::A};
    std::vector<ITDRecord> r{{"a", "d", c, 1.0}, {"b", "d", c, 2.0}, {"c", "d", c, 3.0}};
    const auto s = condition_stats(r, Grouping::PerAtmosphere);
    REQUIRE(s.size() == 1);
    CHECK(s[0].n == 3);
    CHECK(s[0].mu_ms == 2.0);
    CHECK(*s[0].sigma_ms == 1.0);

    const std::vector<ITDRecord> one{{"a", "d", c, 4.0}};
    const Exclusion ex{"z", "d", c};
    const auto s1 = condition_stats(one, Grouping::PerAtmosphere, std::span<const Exclusion>(&ex, 1));
    CHECK(s1[0].n == 1);
    CHECK_FALSE(s1[0].sigma_ms.has_value());
    CHECK(s1[0].absent_count == 1);

    std::mt19937_64 rng(4);
    std::normal_distribution<double> g(1e4, 3.0);
    std::vector<ITDRecord> big;
    std::vector<double> vals;
    for (int i = 0; i < 500; ++i) {
      vals.push_back(g(rng));
      big.push_back({"e" + std::to_string(i), "d", c, vals.back()});
    }
    const auto sb = condition_stats(big, Grouping::PerAtmosphere);
    CHECK(std::abs(*sb[0].sigma_ms - two_pass_sd(vals)) <= 1e-12 * two_pass_sd(vals) * 100);
  }

  TEST_CASE("pooled rows follow per-atmosphere rows") {
    std::vector<ITDRecord> r;
    for (auto atm : kAtmospheres)
      for (auto sz : kSizeClasses) r.push_back({"x", "d", {atm, sz}, 1.0});
    const auto s = condition_stats(r, Grouping::Both);
    CHECK(s.size() == 2 * (kAtmospheres.size() + 1));
    const auto* pooled = find_stats(s, kPooled, SizeClass::B, "d");
    REQUIRE(pooled);
    CHECK(pooled->n == static_cast<int>(kAtmospheres.size()));
    CHECK(find_stats(s, "nope", SizeClass::A, "d") == nullptr);
  }

  TEST_CASE("normal summary curve") {
    const auto c = normal_summary(0, 1, -8, 8, 1601);
    REQUIRE(c.x.size() == 1601);
    CHECK(c.density[800] == doctest::Approx(0.398942).epsilon(1e-5));
    CHECK(trapezoid(c.x, c.density) == doctest::Approx(1.0).epsilon(1e-3));
    const auto w = normal_summary(0, 2, -16, 16, 1601);
    CHECK(w.density[800] == doctest::Approx(c.density[800] / 2));
    CHECK(trapezoid(w.x, w.density) == doctest::Approx(1.0).epsilon(1e-3));
    CHECK_THROWS(normal_summary(0, 0, -1, 1));
  }

  TEST_CASE("detections CSV") {
    testing::TempDir dir("det");
    const std::vector<Detection> rows{{"e1", "sas", 12}, {"e2", "sas", std::nullopt}, {"e1", "net", 0}};
    write_detections(rows, dir / "d.csv");
    CHECK(testing::slurp(dir / "d.csv") == "event_id,detector,ignition_frame\ne1,sas,12\ne2,sas,\ne1,net,0\n");
    CHECK(read_detections(dir / "d.csv") == rows);

    testing::spit(dir / "bad.csv", "event_id,detector,ignition_frame\ne1,sas,x\n");
    CHECK_THROWS_AS(read_detections(dir / "bad.csv"), EvalError);
    testing::spit(dir / "hdr.csv", "id,det,frame\n");
    CHECK_THROWS_AS(read_detections(dir / "hdr.csv"), EvalError);
    CHECK_THROWS(write_detections({{"a,b", "sas", 1}}, dir / "c.csv"));
  }

  TEST_CASE("report on synthetic detections") {
    const auto in = synthetic_input(30);
    const auto rep = build_report(in);
    CHECK(rep.records.size() == 60);
    for (const auto& r : rep.records) {
      if (r.detector == "net") CHECK(r.itd_ms == 0.0);
    }
    const auto* net = find_stats(rep.stats, kPooled, SizeClass::A, "net");
    REQUIRE(net);
    CHECK(net->mu_ms == 0.0);
    CHECK(*net->sigma_ms == 0.0);
    const auto* sas = find_stats(rep.stats, kPooled, SizeClass::A, "sas");
    REQUIRE(sas);
    CHECK(sas->mu_ms > 0.0);
    CHECK(rep.summary.size() == 4);
  }

  TEST_CASE("identical detectors give identical rows") {
    auto in = synthetic_input(20);
    for (auto& d : in.detections)
      if (d.detector == "net") d.ignition_frame = std::optional<int>(*d.ignition_frame + 3);
    std::vector<Detection> copy;
    for (const auto& d : in.detections)
      if (d.detector == "net") copy.push_back({d.event_id, "twin", d.ignition_frame});
    in.detections.insert(in.detections.end(), copy.begin(), copy.end());
    const auto rep = build_report(in);
    for (auto sz : kSizeClasses) {
      const auto* a = find_stats(rep.stats, kPooled, sz, "net");
      const auto* b = find_stats(rep.stats, kPooled, sz, "twin");
      REQUIRE(a);
      REQUIRE(b);
      CHECK(a->n == b->n);
      CHECK(a->mu_ms == b->mu_ms);
      CHECK(a->sigma_ms == b->sigma_ms);
      CHECK(a->mu_ms == doctest::Approx(0.3));
    }
  }

  TEST_CASE("ABSENT detections and non-igniting events") {
    auto in = synthetic_input(6);
    in.detections = {{"ev0", "sas", std::nullopt}, {"ev1", "sas", 41}, {"ev2", "sas", 50}};
    in.labels["ev2"].ignition_frame.reset();
    const auto rep = build_report(in);
    CHECK(rep.records.size() == 1);
    REQUIRE(rep.exclusions.size() == 1);
    CHECK(rep.exclusions[0].event_id == "ev0");
    bool skipped = false;
    for (const auto& w : rep.warnings) skipped = skipped || w.find("1 non-igniting") != std::string::npos;
    CHECK(skipped);
  }

  TEST_CASE("empty input yields a warning, not an error") {
    ReportInput in;
    const auto rep = build_report(in);
    CHECK(rep.records.empty());
    REQUIRE_FALSE(rep.warnings.empty());
    CHECK(rep.warnings[0].find("no detections") != std::string::npos);
  }

  TEST_CASE("report files regenerate byte for byte") {
    testing::TempDir dir("report");
    const auto in = synthetic_input(25);
    compare_report(in, dir / "a");
    compare_report(in, dir / "b");
    for (const char* f : {"itd_sas.csv", "itd_net.csv", "stats.csv", "summary.csv", "hist_A.svg", "hist_B.svg",
                          "warnings.txt"}) {
      CAPTURE(f);
      const auto a = testing::slurp(dir / "a" / f);
      const bool has_text = !a.empty() || std::string(f) == "warnings.txt";
      CHECK(has_text);
      CHECK(a == testing::slurp(dir / "b" / f));
    }
    const auto stats = testing::slurp(dir / "a" / "stats.csv");
    CHECK(stats.rfind("condition,size_class,detector,n,mu_ms,sigma_ms,absent_count\n", 0) == 0);
    CHECK(testing::slurp(dir / "a" / "hist_A.svg").find("<svg") != std::string::npos);
  }
}
