#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>

#include "quadbev/evalkit.hpp"

using namespace qbev;
using namespace qbev::evalkit;
using synth::Box3D;
using synth::LanePolyline;

namespace {

// ---- brute-force oracles (independent reimplementations) -------------------

double oracle_ap(std::vector<std::pair<double, Box3D>> preds, std::vector<Box3D> gts,
                 double tau) {
  // sort by score descending with the production tie order
  std::stable_sort(preds.begin(), preds.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second.x < b.second.x;
  });
  std::vector<bool> used(gts.size(), false);
  std::vector<bool> tp;
  for (const auto& [score, box] : preds) {
    int best = -1;
    double best_d = tau;
    for (size_t g = 0; g < gts.size(); ++g) {
      if (used[g]) continue;
      const double d = std::hypot(box.x - gts[g].x, box.y - gts[g].y);
      if (d <= best_d) {
        best_d = d;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0) {
      used[static_cast<size_t>(best)] = true;
      tp.push_back(true);
    } else {
      tp.push_back(false);
    }
  }
  if (gts.empty()) return preds.empty() ? -1.0 : 0.0;
  double ap = 0;
  for (int ri = 10; ri <= 100; ++ri) {
    const double r = ri / 100.0;
    double best_p = 0;
    long t = 0;
    for (size_t k = 0; k < tp.size(); ++k) {
      if (tp[k]) ++t;
      const double recall = static_cast<double>(t) / static_cast<double>(gts.size());
      const double prec = static_cast<double>(t) / static_cast<double>(k + 1);
      if (recall >= r - 1e-12) best_p = std::max(best_p, prec);
    }
    ap += best_p;
  }
  return ap / 91.0;
}

Box3D rand_box(Rng& rng, int cat) {
  Box3D b;
  b.x = rng.uniform(-6, 6);
  b.y = rng.uniform(-6, 6);
  b.z = rng.uniform(0.5, 1.0);
  b.w = rng.uniform(0.5, 2.5);
  b.l = rng.uniform(0.5, 4.5);
  b.h = rng.uniform(1.0, 2.0);
  b.yaw = rng.uniform(-M_PI, M_PI);
  b.category = cat;
  return b;
}

}  // namespace

TEST_CASE("decode: ground-truth rasters decode back to the boxes") {
  synth::GenSpec spec;
  spec.n_boxes = 4;
  synth::World w = synth::generate_world(3, spec);
  geom::BevGridSpec grid = synth::make_grid("desk");
  synth::GtRasters gt = synth::rasterize_gt(w, grid, {}, {}, 8, 3);

  Tensor heat = gt.det_heatmap;
  for (long i = 0; i < heat.numel(); ++i) heat[i] = (heat[i] - 0.5) * 24.0;
  auto decoded = decode_detections(heat, gt.det_reg, grid, 0.3, 64, 0.5);
  auto gt_boxes = synth::boxes_in_grid(w, grid);
  REQUIRE(decoded.size() == gt_boxes.size());
  for (const auto& d : decoded) {
    double best = 1e9;
    const Box3D* match = nullptr;
    for (const auto& g : gt_boxes)
      if (g.category == d.box.category) {
        const double dist = std::hypot(g.x - d.box.x, g.y - d.box.y);
        if (dist < best) {
          best = dist;
          match = &g;
        }
      }
    REQUIRE(match != nullptr);
    CHECK(best < 1e-3);
    CHECK(std::fabs(match->w - d.box.w) < 1e-3);
    CHECK(std::fabs(match->l - d.box.l) < 1e-3);
    CHECK(std::fabs(match->h - d.box.h) < 1e-3);
    CHECK(std::fabs(synth::wrap_angle(match->yaw - d.box.yaw)) < 1e-3);
    CHECK(std::fabs(match->z - d.box.z) < 1e-3);
  }
}

TEST_CASE("decode: overlapping peaks are suppressed, k=0 gives nothing") {
  geom::BevGridSpec grid = synth::make_grid("desk");
  Tensor heat = Tensor::full({1, grid.h_bev(), grid.w_bev()}, -20.0);
  Tensor reg({8, grid.h_bev(), grid.w_bev()});
  // two adjacent peaks with nearly identical boxes -> IoU > 0.5
  heat.at(0, 30, 30) = 4.0;
  heat.at(0, 30, 32) = 3.0;
  for (int j : {30, 32}) {
    // 4 m wide boxes one meter apart: IoU = 3/5 > 0.5
    reg.at(3, 30, j) = std::log(4.0);
    reg.at(4, 30, j) = std::log(4.0);
    reg.at(5, 30, j) = std::log(1.5);
    reg.at(7, 30, j) = 1.0;
  }
  auto decoded = decode_detections(heat, reg, grid, 0.3, 64, 0.5);
  CHECK(decoded.size() == 1);
  CHECK(decoded[0].score == doctest::Approx(1.0 / (1.0 + std::exp(-4.0))));

  CHECK(decode_detections(heat, reg, grid, 0.3, 0, 0.5).empty());
  Tensor empty_heat = Tensor::full({1, grid.h_bev(), grid.w_bev()}, -20.0);
  CHECK(decode_detections(empty_heat, reg, grid, 0.3, 64, 0.5).empty());
}

TEST_CASE("mAP: perfect predictions give mAP 1, errors 0, NDS 1") {
  Rng rng(5);
  std::vector<std::vector<Box3D>> gts(3);
  std::vector<std::vector<ScoredBox>> preds(3);
  for (int s = 0; s < 3; ++s)
    for (int k = 0; k < 3; ++k) {
      Box3D b = rand_box(rng, k % 2);
      gts[static_cast<size_t>(s)].push_back(b);
      preds[static_cast<size_t>(s)].push_back({b, 0.9});
    }
  auto m = compute_map_nds(preds, gts, 2);
  CHECK(m.map == doctest::Approx(1.0));
  CHECK(m.mate == doctest::Approx(0.0));
  CHECK(m.mase == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(m.maoe == doctest::Approx(0.0));
  CHECK(m.nds_desk == doctest::Approx(1.0));
}

TEST_CASE("mAP: hand instance with one true and one far false positive") {
  std::vector<std::vector<Box3D>> gts(1);
  Box3D g;
  g.x = 0;
  g.y = 0;
  g.w = g.l = g.h = 1;
  g.category = 0;
  gts[0].push_back(g);
  std::vector<std::vector<ScoredBox>> preds(1);
  Box3D close = g;
  close.x = 0.3;
  Box3D far = g;
  far.x = 10.0;
  preds[0].push_back({close, 0.9});
  preds[0].push_back({far, 0.8});
  auto m = compute_map_nds(preds, gts, 1);
  // oracle agrees at the 0.5 m threshold
  const double ap05 =
      oracle_ap({{0.9, close}, {0.8, far}}, gts[0], 0.5);
  CHECK(m.ap_by_threshold.at(0.5) == doctest::Approx(ap05).epsilon(1e-12));
  // recall reaches 1.0 at precision 1 -> every grid point gets precision 1
  CHECK(ap05 == doctest::Approx(1.0));
}

TEST_CASE("mAP: empty GT with predictions scores 0; both empty is excluded") {
  std::vector<std::vector<Box3D>> gts(1);
  std::vector<std::vector<ScoredBox>> preds(1);
  Box3D p;
  p.w = p.l = p.h = 1;
  p.category = 0;
  preds[0].push_back({p, 0.5});
  auto m = compute_map_nds(preds, gts, 2);  // category 1 has neither
  CHECK(m.map == doctest::Approx(0.0));
}

TEST_CASE("mAP agrees with the brute-force oracle on randomized tiny instances") {
  Rng rng(17);
  for (int trial = 0; trial < 25; ++trial) {
    const int n_gt = static_cast<int>(rng.bounded(5));
    const int n_pred = static_cast<int>(rng.bounded(6));
    std::vector<std::vector<Box3D>> gts(2);
    std::vector<std::vector<ScoredBox>> preds(2);
    std::vector<std::vector<std::pair<double, Box3D>>> flat(2);
    for (int s = 0; s < 2; ++s) {
      for (int k = 0; k < n_gt; ++k) gts[static_cast<size_t>(s)].push_back(rand_box(rng, 0));
      for (int k = 0; k < n_pred; ++k) {
        Box3D b = rand_box(rng, 0);
        if (k < n_gt && rng.uniform() < 0.6) {
          b = gts[static_cast<size_t>(s)][static_cast<size_t>(k)];
          b.x += rng.uniform(-1.5, 1.5);
          b.y += rng.uniform(-1.5, 1.5);
        }
        const double score = rng.uniform(0.1, 1.0);
        preds[static_cast<size_t>(s)].push_back({b, score});
        flat[static_cast<size_t>(s)].push_back({score, b});
      }
    }
    auto m = compute_map_nds(preds, gts, 1);
    for (double tau : detection_thresholds()) {
      // oracle over a single global instance: merge samples by disjoint
      // translation so cross-sample matches are impossible
      std::vector<std::pair<double, Box3D>> all_preds;
      std::vector<Box3D> all_gts;
      for (int s = 0; s < 2; ++s) {
        for (auto pr : flat[static_cast<size_t>(s)]) {
          pr.second.x += s * 1000.0;
          all_preds.push_back(pr);
        }
        for (auto g : gts[static_cast<size_t>(s)]) {
          g.x += s * 1000.0;
          all_gts.push_back(g);
        }
      }
      const double expect = oracle_ap(all_preds, all_gts, tau);
      if (expect < 0) {
        CHECK(m.ap_by_threshold.count(tau) == 0);
      } else {
        REQUIRE(m.ap_by_threshold.count(tau) == 1);
        CHECK(std::fabs(m.ap_by_threshold.at(tau) - expect) < 1e-9);
      }
    }
  }
}

TEST_CASE("map IoU: perfect, complement, and hand four-pixel case with oracle") {
  Tensor mask({1, 2, 2}, {1, 0, 1, 1});
  Tensor perfect({1, 2, 2}, {10, -10, 10, 10});
  auto m = map_iou({perfect}, {mask});
  CHECK(m.miou == doctest::Approx(1.0));

  Tensor complement({1, 2, 2}, {-10, 10, -10, -10});
  CHECK(map_iou({complement}, {mask}).miou == doctest::Approx(0.0));

  // hand case: pred {a,b}, gt {a,c} -> inter 1, union 3
  Tensor pred({1, 2, 2}, {10, 10, -10, -10});
  Tensor gt2({1, 2, 2}, {1, 0, 1, 0});
  CHECK(map_iou({pred}, {gt2}).miou == doctest::Approx(1.0 / 3.0));

  // randomized tiny instances against a brute-force counter
  Rng rng(23);
  for (int trial = 0; trial < 25; ++trial) {
    Tensor logits({2, 4, 4});
    Tensor masks({2, 4, 4});
    for (long i = 0; i < logits.numel(); ++i) {
      logits[i] = rng.uniform(-1, 1);
      masks[i] = rng.uniform() < 0.5 ? 1.0 : 0.0;
    }
    auto got = map_iou({logits}, {masks});
    double sum = 0;
    int counted = 0;
    for (int c = 0; c < 2; ++c) {
      long inter = 0, uni = 0;
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) {
          const bool p = logits.at(c, i, j) >= 0;
          const bool g = masks.at(c, i, j) != 0;
          inter += p && g;
          uni += p || g;
        }
      if (uni) {
        sum += static_cast<double>(inter) / static_cast<double>(uni);
        ++counted;
      }
    }
    const double expect = counted ? sum / counted : 0.0;
    CHECK(std::fabs(got.miou - expect) < 1e-9);
  }
}

TEST_CASE("lanes: GT-derived rasters score F1 = 1") {
  synth::GenSpec spec;
  spec.n_boxes = 0;
  spec.n_lanes = 3;
  synth::World w = synth::generate_world(7, spec);
  geom::BevGridSpec grid = synth::make_grid("desk");
  synth::GtRasters gt = synth::rasterize_gt(w, grid, {}, {}, 8, 3);

  Tensor conf = gt.lane_conf;
  for (long i = 0; i < conf.numel(); ++i) conf[i] = (conf[i] - 0.5) * 24.0;
  Tensor emb({4, grid.h_bev(), grid.w_bev()});
  for (long i = 0; i < gt.lane_embed_id.numel(); ++i)
    if (gt.lane_embed_id[i] >= 0) emb[i] = (gt.lane_embed_id[i] + 1.0) * 3.0;
  Tensor cls({2, grid.h_bev(), grid.w_bev()});
  const long hw = gt.lane_class.numel();
  for (long i = 0; i < hw; ++i)
    if (gt.lane_class[i] >= 0) cls[static_cast<long>(gt.lane_class[i]) * hw + i] = 24.0;

  auto lanes = decode_lanes(conf, gt.lane_offset, emb, cls, grid);
  CHECK(lanes.size() == w.lanes.size());
  auto m = lane_fscore({lanes}, {w.lanes});
  CHECK(m.f1 == doctest::Approx(1.0));
  // decoded class matches the generator's per-instance category
  for (const auto& lane : lanes) CHECK((lane.category == 0 || lane.category == 1));
}

TEST_CASE("lanes: no predictions means zero recall; partial match gives 2/3") {
  LanePolyline gt1;
  gt1.points = {{0, 0}, {5, 0}};
  LanePolyline gt2;
  gt2.points = {{0, 2}, {5, 2}};
  auto m = lane_fscore({{}}, {{gt1, gt2}});
  CHECK(m.recall == 0.0);
  CHECK(m.f1 == 0.0);

  DecodedLane pred;
  for (double x = 0; x <= 5.0; x += 0.5) pred.points.push_back({x, 0.05});
  pred.score = 0.9;
  auto m2 = lane_fscore({{pred}}, {{gt1, gt2}});
  CHECK(m2.precision == doctest::Approx(1.0));
  CHECK(m2.recall == doctest::Approx(0.5));
  CHECK(m2.f1 == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("lane F1 agrees with a brute-force matcher on tiny instances") {
  Rng rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    const int n_gt = 1 + static_cast<int>(rng.bounded(3));
    std::vector<LanePolyline> gts;
    for (int k = 0; k < n_gt; ++k) {
      LanePolyline lane;
      const double y = rng.uniform(-6, 6);
      for (double x = -5; x <= 5; x += 1.0) lane.points.push_back({x, y});
      gts.push_back(lane);
    }
    const int n_pred = static_cast<int>(rng.bounded(4));
    std::vector<DecodedLane> preds;
    for (int k = 0; k < n_pred; ++k) {
      DecodedLane lane;
      const double y = k < n_gt && rng.uniform() < 0.7 ? gts[static_cast<size_t>(k)].points[0][1] +
                                                             rng.uniform(-0.6, 0.6)
                                                       : rng.uniform(-8, 8);
      for (double x = -5; x <= 5; x += 0.5) lane.points.push_back({x, y});
      lane.score = rng.uniform(0.2, 1.0);
      preds.push_back(lane);
    }
    auto got = lane_fscore({preds}, {gts});

    // oracle: same greedy rule, recomputed longhand
    std::vector<int> order(preds.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](int a, int b) { return preds[static_cast<size_t>(a)].score > preds[static_cast<size_t>(b)].score; });
    std::vector<bool> used(gts.size(), false);
    long tp = 0;
    for (int pi : order) {
      const auto& lane = preds[static_cast<size_t>(pi)];
      int best = -1;
      double best_cov = 0.75;
      for (size_t gi = 0; gi < gts.size(); ++gi) {
        if (used[gi]) continue;
        // resample at 0.25 m and count points within 0.5 m of the gt line
        long close = 0, total = 0;
        double carry = 0;
        std::vector<std::array<double, 2>> rs{lane.points[0]};
        for (size_t i = 0; i + 1 < lane.points.size(); ++i) {
          const double ax = lane.points[i][0], ay = lane.points[i][1];
          const double ex = lane.points[i + 1][0] - ax, ey = lane.points[i + 1][1] - ay;
          const double len = std::hypot(ex, ey);
          double t = 0.25 - carry;
          while (t <= len) {
            rs.push_back({ax + ex * t / len, ay + ey * t / len});
            t += 0.25;
          }
          carry = len - (t - 0.25);
        }
        for (const auto& p : rs) {
          double d = 1e18;
          for (size_t si = 0; si + 1 < gts[gi].points.size(); ++si) {
            const double ax = gts[gi].points[si][0], ay = gts[gi].points[si][1];
            const double ex = gts[gi].points[si + 1][0] - ax,
                         ey = gts[gi].points[si + 1][1] - ay;
            const double len2 = ex * ex + ey * ey;
            double u = len2 > 0 ? ((p[0] - ax) * ex + (p[1] - ay) * ey) / len2 : 0.0;
            u = std::clamp(u, 0.0, 1.0);
            d = std::min(d, std::hypot(p[0] - (ax + u * ex), p[1] - (ay + u * ey)));
          }
          ++total;
          if (d <= 0.5) ++close;
        }
        const double cov = static_cast<double>(close) / static_cast<double>(total);
        if (cov >= best_cov) {
          best_cov = cov;
          best = static_cast<int>(gi);
        }
      }
      if (best >= 0) {
        used[static_cast<size_t>(best)] = true;
        ++tp;
      }
    }
    const double prec = preds.empty() ? 0.0 : static_cast<double>(tp) / preds.size();
    const double rec = static_cast<double>(tp) / gts.size();
    const double f1 = prec + rec > 0 ? 2 * prec * rec / (prec + rec) : 0.0;
    CHECK(std::fabs(got.f1 - f1) < 1e-9);
  }
}

TEST_CASE("occupancy mIoU: perfect, all-free, hand case, and oracle battery") {
  const int c_occ = 5;
  // perfect
  Tensor grid({2, 2, 2});
  for (long i = 0; i < grid.numel(); ++i) grid[i] = static_cast<double>(i % c_occ);
  Tensor logits({2 * c_occ, 2, 2});
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j)
      for (int k = 0; k < 2; ++k)
        logits[static_cast<long>(occ_channel(k, static_cast<int>(grid.at(i, j, k)), c_occ)) * 4 +
               i * 2 + j] = 10.0;
  CHECK(occ_miou({logits}, {grid}, c_occ).miou == doctest::Approx(1.0));

  // all-free prediction zeroes occupied-category IoUs
  Tensor free_logits({2 * c_occ, 2, 2});
  for (int k = 0; k < 2; ++k)
    for (long cell = 0; cell < 4; ++cell)
      free_logits[static_cast<long>(occ_channel(k, c_occ - 1, c_occ)) * 4 + cell] = 10.0;
  auto m = occ_miou({free_logits}, {grid}, c_occ);
  CHECK(m.miou == doctest::Approx(0.0));

  // randomized tiny instances against brute-force counts
  Rng rng(41);
  for (int trial = 0; trial < 25; ++trial) {
    Tensor g2({2, 2, 2});
    Tensor l2({2 * c_occ, 2, 2});
    for (long i = 0; i < g2.numel(); ++i) g2[i] = static_cast<double>(rng.bounded(c_occ));
    for (long i = 0; i < l2.numel(); ++i) l2[i] = rng.uniform(-1, 1);
    auto got = occ_miou({l2}, {g2}, c_occ);

    std::vector<long> inter(c_occ, 0), uni(c_occ, 0);
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j)
        for (int k = 0; k < 2; ++k) {
          int arg = 0;
          for (int c = 1; c < c_occ; ++c)
            if (l2[static_cast<long>(occ_channel(k, c, c_occ)) * 4 + i * 2 + j] >
                l2[static_cast<long>(occ_channel(k, arg, c_occ)) * 4 + i * 2 + j])
              arg = c;
          const int label = static_cast<int>(g2.at(i, j, k));
          if (arg == label) {
            ++inter[arg];
            ++uni[arg];
          } else {
            ++uni[arg];
            ++uni[label];
          }
        }
    double sum = 0;
    int counted = 0;
    for (int c = 0; c + 1 < c_occ; ++c)
      if (uni[c]) {
        sum += static_cast<double>(inter[c]) / static_cast<double>(uni[c]);
        ++counted;
      }
    const double expect = counted ? sum / counted : 0.0;
    CHECK(std::fabs(got.miou - expect) < 1e-9);
  }
}

TEST_CASE("discount factor: product of ratios, identity, and guards") {
  auto d = discount_factor({45.4, 56.4, 58.4, 37.6}, {45.6, 55.7, 57.8, 36.3});
  const double expect = (45.4 / 45.6) * (56.4 / 55.7) * (58.4 / 57.8) * (37.6 / 36.3);
  CHECK(d.cumulative == doctest::Approx(expect).epsilon(1e-12));
  CHECK(d.ratios.size() == 4);

  auto same = discount_factor({1.0, 2.0, 3.0}, {1.0, 2.0, 3.0});
  CHECK(same.cumulative == 1.0);

  CHECK_THROWS_AS(discount_factor({1.0}, {0.0}), QbError);
}

TEST_CASE("metrics are invariant to prediction and GT ordering") {
  Rng rng(53);
  std::vector<std::vector<Box3D>> gts(1);
  std::vector<std::vector<ScoredBox>> preds(1);
  for (int k = 0; k < 4; ++k) {
    gts[0].push_back(rand_box(rng, 0));
    preds[0].push_back({rand_box(rng, 0), rng.uniform(0.2, 1.0)});
  }
  auto base = compute_map_nds(preds, gts, 1);
  std::reverse(gts[0].begin(), gts[0].end());
  std::reverse(preds[0].begin(), preds[0].end());
  auto flipped = compute_map_nds(preds, gts, 1);
  CHECK(base.map == doctest::Approx(flipped.map).epsilon(1e-12));
  CHECK(base.mate == doctest::Approx(flipped.mate).epsilon(1e-12));
}

TEST_CASE("efficiency benchmark: analytic ratio below 1 and consistent with flops") {
  nets::ModelConfig cfg;
  cfg.n_cameras = 1;
  cfg.img_w = 32;
  cfg.img_h = 16;
  cfg.backbone_widths = {4, 6, 8};
  cfg.grid = synth::make_grid("tiny");
  cfg.c_bev = 8;
  cfg.head_width = 6;
  cfg.occ_head_width = 6;
  cfg.c_det = 3;
  nets::QuadModel model(cfg);

  synth::GenSpec gen;
  gen.n_boxes = 1;
  gen.box_halfx = 3;
  gen.box_halfy = 3;
  gen.box_min_dist = 1.0;
  gen.lane_spacing = 2.0;
  gen.lane_length_min = 6;
  gen.lane_length_max = 7;
  synth::World w = synth::generate_world(1, gen);
  auto rig = synth::make_rig("tiny");
  synth::Sample sample = synth::render_sample(w, rig, geom::EgoPose{}, cfg.grid);

  auto rep = efficiency_benchmark(model, sample, 3, 1);
  CHECK(rep.mac_ratio() < 1.0);
  CHECK(rep.quad_macs == nets::flops_count_quad(cfg).total());
  uint64_t singles = 0;
  for (auto v : rep.single_macs) singles += v;
  CHECK(singles == nets::flops_sum_of_singles(cfg));
  CHECK(rep.quad_latency_ms > 0);
  CHECK(rep.baseline_latency_ms > 0);
  CHECK(rep.repeats == 3);
  const std::string csv = rep.to_csv();
  CHECK(csv.find("latency_sd_ms") != std::string::npos);
  CHECK(csv.find("ratio,") != std::string::npos);
}
