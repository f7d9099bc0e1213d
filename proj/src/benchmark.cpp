#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "wssod/log.hpp"
#include "wssod/pipeline.hpp"

namespace wssod {

namespace {

struct Stats {
  int n = 0;
  double mean = 0.0;
  double sd = 0.0;  // sample standard deviation, 0 for a single value
};

Stats stats_of(const std::vector<double>& v) {
  Stats s;
  s.n = static_cast<int>(v.size());
  if (v.empty()) return s;
  for (double x : v) s.mean += x;
  s.mean /= s.n;
  if (s.n > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.sd = std::sqrt(ss / (s.n - 1));
  }
  return s;
}

std::string fmt(double v, int digits = 4) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(digits);
  os << v;
  return os.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace

std::string cell_to_jsonl(const CellResult& r) {
  nlohmann::json j = {{"variant", variant_name(r.variant)},
                      {"fraction", r.fraction},
                      {"seed", r.seed},
                      {"teacher_map", nullptr},
                      {"student_map", r.student_map},
                      {"wall_seconds", r.wall_seconds},
                      {"status", r.ok ? "ok" : "failed"},
                      {"error", r.error}};
  if (r.teacher_map) j["teacher_map"] = *r.teacher_map;
  return j.dump();
}

CellResult cell_from_jsonl(const std::string& line) {
  const nlohmann::json j = nlohmann::json::parse(line);
  CellResult r;
  r.variant = parse_variant(j.at("variant").get<std::string>());
  r.fraction = j.at("fraction").get<double>();
  r.seed = j.at("seed").get<std::uint64_t>();
  if (!j.at("teacher_map").is_null()) r.teacher_map = j.at("teacher_map").get<double>();
  r.student_map = j.at("student_map").get<double>();
  r.wall_seconds = j.at("wall_seconds").get<double>();
  r.ok = j.at("status").get<std::string>() == "ok";
  r.error = j.value("error", std::string());
  return r;
}

std::vector<CellResult> load_results(const std::filesystem::path& path) {
  std::vector<CellResult> out;
  std::ifstream in(path);
  if (!in) return out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(cell_from_jsonl(line));
    } catch (const std::exception& e) {
      // A torn last line from an interrupted append is dropped; that cell simply runs again.
      log_warn(path.string() + ":" + std::to_string(lineno) + ": unreadable record ignored (" + e.what() + ")");
    }
  }
  return out;
}

BenchmarkResult run_benchmark(const RunConfig& cfg, const Dataset& data, const std::filesystem::path& store) {
  const BenchSettings& b = cfg.bench;
  std::vector<CellResult> requested;
  for (Variant v : b.variants) {
    for (double f : b.fractions) {
      for (std::uint64_t s : b.seeds) {
        CellResult c;
        c.variant = v;
        c.fraction = f;
        c.seed = s;
        requested.push_back(c);
      }
    }
  }

  // Later records win, so a retried cell replaces its earlier failure.
  std::vector<std::optional<CellResult>> final(requested.size());
  for (const CellResult& prev : load_results(store)) {
    for (std::size_t i = 0; i < requested.size(); ++i) {
      if (requested[i].same_cell(prev)) final[i] = prev;
    }
  }
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < requested.size(); ++i) {
    if (!final[i] || !final[i]->ok) todo.push_back(i);
  }
  log_info("bench: " + std::to_string(requested.size()) + " cells, " + std::to_string(requested.size() - todo.size()) +
           " already stored");

  if (store.has_parent_path()) std::filesystem::create_directories(store.parent_path());
  std::mutex mu;
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t k = next++; k < todo.size(); k = next++) {
      const CellResult& want = requested[todo[k]];
      CellResult r;
      try {
        r = run_cell(cfg, data, want.variant, want.fraction, want.seed);
      } catch (const std::exception& e) {
        r = want;
        r.ok = false;
        r.error = e.what();
        log_warn("cell " + variant_name(want.variant) + " f=" + fmt(want.fraction, 2) + " seed=" +
                 std::to_string(want.seed) + " failed: " + e.what());
      }
      std::lock_guard lock(mu);
      std::ofstream out(store, std::ios::app);
      out << cell_to_jsonl(r) << '\n';
      out.flush();
      if (!out) throw std::runtime_error("cannot append to " + store.string());
      final[todo[k]] = r;
      log_info("cell " + variant_name(r.variant) + " f=" + fmt(r.fraction, 2) + " seed=" + std::to_string(r.seed) +
               (r.ok ? " student mAP " + fmt(r.student_map) : std::string(" failed")));
    }
  };
  const int jobs = std::max(1, std::min<int>(b.jobs, static_cast<int>(todo.size())));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (int i = 0; i < jobs; ++i) pool.emplace_back(worker);
  }

  BenchmarkResult result;
  for (auto& c : final) result.cells.push_back(*c);
  return result;
}

void emit_report(const BenchmarkResult& result, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);

  struct Group {
    std::vector<double> teacher;
    std::vector<double> student;
    int failed = 0;
  };
  std::map<std::pair<int, double>, Group> groups;  // (variant, fraction)
  for (const CellResult& c : result.cells) {
    Group& g = groups[{static_cast<int>(c.variant), c.fraction}];
    if (!c.ok) {
      ++g.failed;
      continue;
    }
    g.student.push_back(c.student_map);
    if (c.teacher_map) g.teacher.push_back(*c.teacher_map);
  }

  std::ostringstream csv;
  csv << "variant,fraction,seeds,failed,student_map_mean,student_map_sd,student_map,teacher_map_mean,teacher_map_sd,"
         "teacher_map\n";
  for (const auto& [key, g] : groups) {
    const Stats s = stats_of(g.student);
    const Stats t = stats_of(g.teacher);
    csv << variant_name(static_cast<Variant>(key.first)) << ',' << fmt(key.second, 2) << ',' << s.n << ',' << g.failed
        << ',' << fmt(s.mean) << ',' << fmt(s.sd) << ',' << fmt(s.mean) << " ± " << fmt(s.sd) << ',';
    if (t.n > 0) {
      csv << fmt(t.mean) << ',' << fmt(t.sd) << ',' << fmt(t.mean) << " ± " << fmt(t.sd);
    } else {
      csv << ",,";
    }
    csv << '\n';
  }
  write_text(out_dir / "results.csv", csv.str());

  // Student mAP vs fraction, one polyline per variant with +-sd whiskers.
  constexpr double kW = 640, kH = 420, kL = 60, kR = 140, kT = 30, kB = 50;
  const double pw = kW - kL - kR;
  const double ph = kH - kT - kB;
  double fmin = 1.0, fmax = 0.0;
  for (const auto& [key, g] : groups) {
    fmin = std::min(fmin, key.second);
    fmax = std::max(fmax, key.second);
  }
  if (fmax <= fmin) {
    fmin -= 0.05;
    fmax += 0.05;
  }
  auto px = [&](double f) { return kL + pw * (f - fmin) / (fmax - fmin); };
  auto py = [&](double m) { return kT + ph * (1.0 - std::clamp(m, 0.0, 1.0)); };
  const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c"};

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<line x1=\"" << kL << "\" y1=\"" << kT + ph << "\" x2=\"" << kL + pw << "\" y2=\"" << kT + ph
      << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << kL << "\" y1=\"" << kT << "\" x2=\"" << kL << "\" y2=\"" << kT + ph << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 5; ++i) {
    const double m = i / 5.0;
    svg << "<line x1=\"" << kL - 4 << "\" y1=\"" << py(m) << "\" x2=\"" << kL + pw << "\" y2=\"" << py(m)
        << "\" stroke=\"#ddd\"/>\n";
    svg << "<text x=\"" << kL - 8 << "\" y=\"" << py(m) + 4 << "\" text-anchor=\"end\">" << fmt(m, 1) << "</text>\n";
  }
  std::vector<double> fractions;
  for (const auto& [key, g] : groups) fractions.push_back(key.second);
  std::sort(fractions.begin(), fractions.end());
  fractions.erase(std::unique(fractions.begin(), fractions.end()), fractions.end());
  for (double f : fractions) {
    svg << "<text x=\"" << px(f) << "\" y=\"" << kT + ph + 18 << "\" text-anchor=\"middle\">" << fmt(f, 2) << "</text>\n";
  }
  svg << "<text x=\"" << kL + pw / 2 << "\" y=\"" << kH - 10 << "\" text-anchor=\"middle\">labeled fraction</text>\n";
  svg << "<text x=\"16\" y=\"" << kT + ph / 2 << "\" transform=\"rotate(-90 16 " << kT + ph / 2
      << ")\" text-anchor=\"middle\">student mAP@0.5</text>\n";

  int legend = 0;
  for (int v = 0; v < 3; ++v) {
    std::ostringstream pts;
    std::ostringstream marks;
    bool any = false;
    for (const auto& [key, g] : groups) {
      if (key.first != v || g.student.empty()) continue;
      const Stats s = stats_of(g.student);
      const double x = px(key.second);
      pts << x << ',' << py(s.mean) << ' ';
      marks << "<line x1=\"" << x << "\" y1=\"" << py(s.mean - s.sd) << "\" x2=\"" << x << "\" y2=\"" << py(s.mean + s.sd)
            << "\" stroke=\"" << colors[v] << "\"/>\n";
      marks << "<circle cx=\"" << x << "\" cy=\"" << py(s.mean) << "\" r=\"3\" fill=\"" << colors[v] << "\"/>\n";
      any = true;
    }
    if (!any) continue;
    svg << "<polyline fill=\"none\" stroke=\"" << colors[v] << "\" stroke-width=\"2\" points=\"" << pts.str() << "\"/>\n"
        << marks.str();
    const double ly = kT + 10 + 20 * legend++;
    svg << "<line x1=\"" << kL + pw + 15 << "\" y1=\"" << ly << "\" x2=\"" << kL + pw + 35 << "\" y2=\"" << ly
        << "\" stroke=\"" << colors[v] << "\" stroke-width=\"2\"/>\n";
    svg << "<text x=\"" << kL + pw + 40 << "\" y=\"" << ly + 4 << "\">" << variant_name(static_cast<Variant>(v))
        << "</text>\n";
  }
  svg << "</svg>\n";
  write_text(out_dir / "map_vs_fraction.svg", svg.str());
}

}  // namespace wssod
