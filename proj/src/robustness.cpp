#include "mpsn/robustness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>

#include <json.hpp>

#include "mpsn/errors.hpp"
#include "mpsn/training.hpp"

namespace mpsn {

namespace {

using nlohmann::json;

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

Tensor grad_or_zero(const Graph& g, Var v, const Tensor& like) {
  const Tensor& gr = g.grad(v);
  return gr.empty() ? Tensor(like.shape()) : gr;
}

void perturb(Tensor& pixels, const Tensor& grad, double eps, bool clamp) {
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    double v = pixels[i] + eps * sign(grad[i]);
    if (clamp) v = std::clamp(v, 0.0, 1.0);
    pixels[i] = v;
  }
}

std::vector<CamHeatmap> cams(ModelBundle& m, const std::vector<FrameSample>& samples,
                             FlowProvider* flow) {
  std::vector<CamHeatmap> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(model_cam(m, s, flow));
  return out;
}

double ap_or_nan(const std::optional<double>& ap) { return ap ? *ap : std::nan(""); }

}  // namespace

void validate(const AttackConfig& cfg) {
  for (std::size_t i = 0; i < cfg.epsilons.size(); ++i) {
    const double e = cfg.epsilons[i];
    if (!(e >= 0.0 && e <= 1.0)) throw ConfigError("epsilon " + std::to_string(e) + " outside [0,1]");
    if (i > 0 && e < cfg.epsilons[i - 1]) throw ConfigError("epsilons must be ascending");
  }
}

FgsmResult fgsm_perturb(ModelBundle& bundle, const FrameSample& sample, const HeadLossConfig& loss,
                        double eps, bool clamp, FlowProvider* flow) {
  if (!(eps >= 0.0 && eps <= 1.0)) throw ConfigError("epsilon must lie in [0,1]");
  Graph g(false, false);
  const SampleLoss sl = sample_loss(g, bundle, sample, loss, flow, true);
  g.backward(sl.loss);

  FgsmResult r;
  r.grad_current = grad_or_zero(g, sl.current, sample.current.pixels);
  r.grad_previous = grad_or_zero(g, sl.previous, sample.previous.pixels);
  const auto nonzero = [](const Tensor& t) {
    return std::any_of(t.values().begin(), t.values().end(), [](double v) { return v != 0.0; });
  };
  r.zero_gradient = !nonzero(r.grad_current) && !nonzero(r.grad_previous);
  r.adversarial = sample;
  if (r.zero_gradient) return r;
  perturb(r.adversarial.current.pixels, r.grad_current, eps, clamp);
  perturb(r.adversarial.previous.pixels, r.grad_previous, eps, clamp);
  return r;
}

double sample_loss_value(ModelBundle& bundle, const FrameSample& sample,
                         const HeadLossConfig& loss, FlowProvider* flow) {
  Graph g(false, false);
  const SampleLoss sl = sample_loss(g, bundle, sample, loss, flow, false);
  return g.value(sl.loss)[0];
}

CamHeatmap cam_heatmap(const FeatureMap& feat, std::string source_layer) {
  const Tensor& v = feat.values;
  if (v.rank() != 3) throw DimensionError("cam_heatmap expects C x H x W, got " + v.shape_string());
  const std::size_t c = v.channels(), h = v.height(), w = v.width();
  CamHeatmap out{Tensor({h, w}), std::move(source_layer)};
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double s = 0.0;
      for (std::size_t k = 0; k < c; ++k) s += v.at(k, y, x);
      out.values[y * w + x] = s / static_cast<double>(c);
    }
  }
  const auto [lo, hi] = std::minmax_element(out.values.values().begin(), out.values.values().end());
  const double min = *lo, max = *hi;
  for (double& x : out.values.values()) x = max > min ? (x - min) / (max - min) : 0.5;
  return out;
}

CamHeatmap model_cam(ModelBundle& bundle, const FrameSample& sample, FlowProvider* flow) {
  const auto fm = flow_input(bundle, sample, flow);
  Graph g(false, false);
  const ForwardVars fw = forward_pipeline(g, bundle, g.constant(sample.current.pixels),
                                          g.constant(sample.previous.pixels), fm ? &*fm : nullptr);
  return cam_heatmap(FeatureMap{g.value(fw.head.hidden), kAnchorStride}, kCamLayer);
}

double ni(const std::vector<CamHeatmap>& clean, const std::vector<CamHeatmap>& adv) {
  if (clean.empty() || adv.empty()) throw ContractError("ni: heatmap sets must be non-empty");
  if (clean.size() != adv.size()) throw ContractError("ni: heatmap sets differ in size");
  const Shape& shape = clean.front().values.shape();
  for (const auto* set : {&clean, &adv}) {
    for (const auto& c : *set) {
      if (c.values.shape() != shape) {
        throw ContractError("ni: heatmap shape " + c.values.shape_string() + " differs from " +
                            shape_string(shape));
      }
    }
  }
  const std::size_t cells = shape_size(shape);
  const double nc = static_cast<double>(clean.size()), na = static_cast<double>(adv.size());
  double sum_sq = 0.0;
  for (std::size_t i = 0; i < cells; ++i) {
    double mc = 0.0, ma = 0.0;
    for (const auto& c : clean) mc += c.values[i];
    for (const auto& a : adv) ma += a.values[i];
    const double mu = (mc + ma) / (nc + na);
    mc /= nc;
    ma /= na;
    double var = 0.0;
    for (const auto& c : clean) var += (c.values[i] - mu) * (c.values[i] - mu);
    for (const auto& a : adv) var += (a.values[i] - mu) * (a.values[i] - mu);
    const double sd = std::sqrt(var / (nc + na));
    if (sd <= 1e-12) continue;
    const double z = (ma - mc) / sd;
    sum_sq += z * z;
  }
  return std::sqrt(sum_sq);
}

BoundCheck diff_bound_check(const FrameSample& sample, const FrameSample& adv, double eps,
                            const Tensor& grad_current, const Tensor& grad_previous) {
  const Tensor& a = sample.current.pixels;
  const Tensor& b = sample.previous.pixels;
  for (const Tensor* t : {&b, &adv.current.pixels, &adv.previous.pixels, &grad_current, &grad_previous}) {
    require_same_shape(a, *t, "diff_bound_check");
  }
  BoundCheck r;
  r.max_violation = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double before = std::fabs(a[i] - b[i]);
    const double after = std::fabs(adv.current.pixels[i] - adv.previous.pixels[i]);
    const double t = std::fabs(sign(grad_current[i]) - sign(grad_previous[i]));
    const double excess = std::fabs(after - before) - eps * t;
    r.max_violation = std::max(r.max_violation, excess);
  }
  if (a.empty()) r.max_violation = 0.0;
  r.ok = r.max_violation <= kBoundSlack;
  return r;
}

std::vector<Interval> epsilon_threshold(double j, double k, double l, double m) {
  // |j + e k| <= |l + e m|  <=>  (p0 + e p1) (q0 + e q1) >= 0.
  const double p0 = l - j, p1 = m - k;
  const double q0 = l + j, q1 = m + k;
  if ((p0 == 0.0 && p1 == 0.0) || (q0 == 0.0 && q1 == 0.0)) return {{0.0, 1.0}};

  std::vector<double> roots;
  for (const auto& [c0, c1] : {std::pair{p0, p1}, std::pair{q0, q1}}) {
    if (c1 != 0.0) {
      const double r = -c0 / c1;
      if (r >= 0.0 && r <= 1.0) roots.push_back(r);
    }
  }
  std::vector<double> points{0.0, 1.0};
  points.insert(points.end(), roots.begin(), roots.end());
  std::sort(points.begin(), points.end());
  points.erase(std::unique(points.begin(), points.end()), points.end());

  auto holds = [&](double e) {
    if (std::find(roots.begin(), roots.end(), e) != roots.end()) return true;
    return (p0 + e * p1) * (q0 + e * q1) >= 0.0;
  };

  std::vector<Interval> out;
  auto add = [&](double lo, double hi) {
    if (!out.empty() && out.back().hi >= lo) {
      out.back().hi = std::max(out.back().hi, hi);
    } else {
      out.push_back({lo, hi});
    }
  };
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (holds(points[i])) add(points[i], points[i]);
    if (i + 1 < points.size() && holds(0.5 * (points[i] + points[i + 1]))) {
      add(points[i], points[i + 1]);
    }
  }
  return out;
}

std::pair<double, double> fit_quadratic(const std::vector<double>& eps, const std::vector<double>& y) {
  if (eps.size() != y.size()) throw ContractError("fit_quadratic: length mismatch");
  double s2 = 0, s3 = 0, s4 = 0, t1 = 0, t2 = 0;
  for (std::size_t i = 0; i < eps.size(); ++i) {
    const double e = eps[i];
    s2 += e * e;
    s3 += e * e * e;
    s4 += e * e * e * e;
    t1 += e * y[i];
    t2 += e * e * y[i];
  }
  const double det = s2 * s4 - s3 * s3;
  if (det <= 1e-12 * s2 * s4) {
    // Fewer than two distinct nonzero epsilons: fit the linear term alone.
    return {s2 > 0 ? t1 / s2 : 0.0, 0.0};
  }
  return {(t1 * s4 - t2 * s3) / det, (s2 * t2 - s3 * t1) / det};
}

RobustnessReport robustness_sweep(SweepModel mpsn, SweepModel baseline,
                                  const std::vector<FrameSample>& samples, const AttackConfig& cfg,
                                  const HeadLossConfig& loss, const DetectConfig& detect_cfg) {
  validate(cfg);
  if (!mpsn.bundle || !baseline.bundle) throw ContractError("robustness_sweep needs two models");
  if (samples.empty()) throw ContractError("robustness_sweep: no samples");
  const auto clean_mpsn = cams(*mpsn.bundle, samples, mpsn.flow);
  const auto clean_base = cams(*baseline.bundle, samples, baseline.flow);

  RobustnessReport report;
  for (double eps : cfg.epsilons) {
    SweepRow row;
    row.eps = eps;
    for (auto [model, clean, ap, ni_out] :
         {std::tuple{mpsn, &clean_mpsn, &row.ap50_mpsn, &row.ni_mpsn},
          std::tuple{baseline, &clean_base, &row.ap50_base, &row.ni_base}}) {
      std::vector<FrameSample> attacked;
      attacked.reserve(samples.size());
      for (const auto& s : samples) {
        attacked.push_back(eps == 0.0 ? s
                                      : fgsm_perturb(*model.bundle, s, loss, eps, cfg.clamp, model.flow)
                                            .adversarial);
      }
      *ap = ap_or_nan(ap50(detect_all(*model.bundle, attacked, detect_cfg, model.flow)));
      *ni_out = ni(*clean, cams(*model.bundle, attacked, model.flow));
    }
    report.rows.push_back(row);
  }

  std::vector<double> eps, ni_m, ni_b;
  for (const auto& r : report.rows) {
    eps.push_back(r.eps);
    ni_m.push_back(r.ni_mpsn);
    ni_b.push_back(r.ni_base);
  }
  auto& t = report.threshold;
  std::tie(t.j, t.k) = fit_quadratic(eps, ni_m);
  std::tie(t.l, t.m) = fit_quadratic(eps, ni_b);
  t.intervals = epsilon_threshold(t.j, t.k, t.l, t.m);
  return report;
}

std::string sweep_csv(const RobustnessReport& report) {
  std::string out = "eps,ap50_mpsn,ap50_base,ni_mpsn,ni_base\n";
  char buf[32];
  for (const auto& r : report.rows) {
    const double cols[] = {r.eps, r.ap50_mpsn, r.ap50_base, r.ni_mpsn, r.ni_base};
    for (std::size_t i = 0; i < 5; ++i) {
      const auto res = std::to_chars(buf, buf + sizeof(buf), cols[i]);
      out.append(buf, res.ptr);
      out += i + 1 < 5 ? ',' : '\n';
    }
  }
  return out;
}

std::string report_to_json(const RobustnessReport& report) {
  json rows = json::array();
  for (const auto& r : report.rows) {
    rows.push_back({{"eps", r.eps},
                    {"ap50_mpsn", r.ap50_mpsn},
                    {"ap50_base", r.ap50_base},
                    {"ni_mpsn", r.ni_mpsn},
                    {"ni_base", r.ni_base}});
  }
  json intervals = json::array();
  for (const auto& i : report.threshold.intervals) intervals.push_back({i.lo, i.hi});
  const auto& t = report.threshold;
  json j = {{"rows", rows},
            {"threshold", {{"j", t.j}, {"k", t.k}, {"l", t.l}, {"m", t.m}, {"intervals", intervals}}}};
  return j.dump(2);
}

RobustnessReport report_from_json(const std::string& text) {
  RobustnessReport r;
  try {
    const json j = json::parse(text);
    for (const auto& row : j.at("rows")) {
      r.rows.push_back(SweepRow{row.at("eps"), row.at("ap50_mpsn"), row.at("ap50_base"),
                                row.at("ni_mpsn"), row.at("ni_base")});
    }
    const auto& t = j.at("threshold");
    r.threshold.j = t.at("j");
    r.threshold.k = t.at("k");
    r.threshold.l = t.at("l");
    r.threshold.m = t.at("m");
    for (const auto& i : t.at("intervals")) r.threshold.intervals.push_back({i[0], i[1]});
  } catch (const json::exception& e) {
    throw ParseError(std::string("robustness report: ") + e.what(), 0);
  }
  return r;
}

}  // namespace mpsn
