#include <algorithm>
#include <cmath>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "defectforge/error.hpp"
#include "defectforge/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace defectforge {

namespace {

// 3x5 glyphs, one string of 15 cells per character, row-major.
const char* glyph(char c) {
  switch (c) {
    case 'A': return ".#.#.#####.##.#";
    case 'B': return "##.#.###.#.###.";
    case 'C': return ".###..#..#...##";
    case 'D': return "##.#.##.##.###.";
    case 'E': return "####..##.#..###";
    case 'F': return "####..##.#..#..";
    case 'G': return ".###..#.##.#.##";
    case 'H': return "#.##.#####.##.#";
    case 'I': return "###.#..#..#.###";
    case 'J': return "..#..#..##.#.#.";
    case 'K': return "#.##.###.#.##.#";
    case 'L': return "#..#..#..#..###";
    case 'M': return "#.########.##.#";
    case 'N': return "##.#.##.##.##.#";
    case 'O': return ".#.#.##.##.#.#.";
    case 'P': return "##.#.###.#..#..";
    case 'Q': return ".#.#.##.###..##";
    case 'R': return "##.#.###.#.##.#";
    case 'S': return ".###...#...###.";
    case 'T': return "###.#..#..#..#.";
    case 'U': return "#.##.##.##.####";
    case 'V': return "#.##.##.##.#.#.";
    case 'W': return "#.##.########.#";
    case 'X': return "#.##.#.#.#.##.#";
    case 'Y': return "#.##.#.#..#..#.";
    case 'Z': return "###..#.#.#..###";
    case '0': return "####.##.##.####";
    case '1': return ".#.##..#..#.###";
    case '2': return "##...#.#.#..###";
    case '3': return "##...#.#...###.";
    case '4': return "#.##.####..#..#";
    case '5': return "####..##...###.";
    case '6': return ".###..####.####";
    case '7': return "###..#.#..#..#.";
    case '8': return "####.#####.####";
    case '9': return "####.####..###.";
    case '.': return ".............#.";
    case '-': return "......###......";
    default: return "...............";
  }
}

constexpr int kGlyphW = 3, kGlyphH = 5;

void draw_text(std::vector<std::uint8_t>& px, int width, int x0, int y0, const std::string& text, int scale,
               std::uint8_t ink) {
  int x = x0;
  for (char ch : text) {
    const char* g = glyph(static_cast<char>(std::toupper(static_cast<unsigned char>(ch))));
    const std::size_t len = std::char_traits<char>::length(g);
    for (int gy = 0; gy < kGlyphH; ++gy)
      for (int gx = 0; gx < kGlyphW; ++gx) {
        const std::size_t k = static_cast<std::size_t>(gy * kGlyphW + gx);
        if (k >= len || g[k] != '#') continue;
        for (int sy = 0; sy < scale; ++sy)
          for (int sx = 0; sx < scale; ++sx) {
            const int px_x = x + gx * scale + sx, px_y = y0 + gy * scale + sy;
            if (px_x >= 0 && px_x < width) px[static_cast<std::size_t>(px_y) * width + px_x] = ink;
          }
      }
    x += (kGlyphW + 1) * scale;
  }
}

std::string percent(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", 100.0 * v);
  return buf;
}

}  // namespace

ImageBuffer render_montage(const ImageBuffer& normal_in, const ImageBuffer& candidate_in, const std::string& caption) {
  const ImageBuffer normal = to_grayscale(normal_in);
  const ImageBuffer candidate = to_grayscale(candidate_in);
  if (!normal.same_shape(candidate)) {
    throw Error(ErrorCode::DimensionMismatch, "montage panels differ in size");
  }
  const int w = normal.width(), h = normal.height(), gap = 2;
  const int scale = std::max(1, w / 32);
  const int caption_h = kGlyphH * scale + 2 * gap;
  const int width = 3 * w + 2 * gap;
  const int height = h + caption_h;
  std::vector<std::uint8_t> px(static_cast<std::size_t>(width) * height, 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::size_t row = static_cast<std::size_t>(y) * width;
      px[row + x] = normal.at(x, y);
      px[row + w + gap + x] = candidate.at(x, y);
      px[row + 2 * (w + gap) + x] = static_cast<std::uint8_t>(std::abs(normal.at(x, y) - candidate.at(x, y)));
    }
  draw_text(px, width, gap, h + gap, caption, scale, 255);
  return ImageBuffer(width, height, 1, std::move(px));
}

void emit_report(const std::vector<StrategyResult>& results, const fs::path& out, const ReportOptions& options) {
  if (results.empty()) throw Error(ErrorCode::InvalidArgument, "no strategy results to report");
  fs::create_directories(out);

  std::vector<std::string> categories;
  for (const auto& r : results)
    for (const auto& [cat, _] : r.category_auroc)
      if (std::find(categories.begin(), categories.end(), cat) == categories.end()) categories.push_back(cat);
  std::sort(categories.begin(), categories.end());

  std::size_t best = 0;
  for (std::size_t i = 1; i < results.size(); ++i)
    if (results[i].auroc > results[best].auroc) best = i;

  std::ostringstream txt;
  txt << "strategy          auroc  pooled";
  for (const auto& c : categories) txt << "  " << c;
  txt << "\n";
  json rows = json::array();
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& r = results[i];
    const char letter = strategy_letter(r.plan.strategy);
    char head[64];
    std::snprintf(head, sizeof head, "(%c) %-13s %5s%s %6s", letter, strategy_name(r.plan.strategy).c_str(),
                  percent(r.auroc).c_str(), i == best ? "*" : " ", percent(r.pooled_auroc).c_str());
    txt << head;
    json per = json::object();
    for (const auto& c : categories) {
      auto it = r.category_auroc.find(c);
      const std::string v = it == r.category_auroc.end() ? "-" : percent(it->second);
      txt << "  " << std::string(c.size() > v.size() ? c.size() - v.size() : 0, ' ') << v;
      if (it != r.category_auroc.end()) per[c] = std::round(1000.0 * it->second) / 10.0;
    }
    txt << "\n";
    rows.push_back({{"strategy", std::string(1, letter)},
                    {"name", strategy_name(r.plan.strategy)},
                    {"auroc_percent", std::round(1000.0 * r.auroc) / 10.0},
                    {"pooled_auroc_percent", std::round(1000.0 * r.pooled_auroc) / 10.0},
                    {"category_auroc_percent", per},
                    {"best", i == best}});

    json curve = json::array();
    for (std::size_t s = 0; s < r.stages.size(); ++s)
      curve.push_back({{"stage", r.plan.stages.size() > s ? r.plan.stages[s].schedule.stage : "single"},
                       {"loss", r.stages[s].loss}});
    write_text(out / "loss_curves" / (std::string(1, letter) + ".json"), curve.dump(2) + "\n");
  }
  txt << "* best mean per-category AUROC (percent)\n";
  write_text(out / "report.txt", txt.str());
  write_text(out / "report.json", json{{"rows", rows}}.dump(2) + "\n");

  if (!options.gen_dir) return;
  const fs::path log = *options.gen_dir / "filter_reports.jsonl";
  std::ifstream in(log);
  if (!in) return;
  std::map<std::string, int> drawn;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    const std::string decision = j.value("decision", "");
    if (decision.empty() || drawn[decision] >= options.montages_per_decision) continue;
    const ImageBuffer normal = load_image(*options.gen_dir / j.at("normal").get<std::string>());
    const ImageBuffer candidate = load_image(*options.gen_dir / j.at("candidate").get<std::string>());
    char name[96];
    std::snprintf(name, sizeof name, "%s-%d.png", decision.c_str(), drawn[decision]++);
    save_image(render_montage(normal, candidate, decision), out / "montages" / name);
  }
}

}  // namespace defectforge
