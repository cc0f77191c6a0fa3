// Copyright (c) 2026 dermaudit contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "dermaudit/image.hpp"
#include "dermaudit/stats.hpp"

namespace dermaudit::plot {

inline const cv::Scalar kLightColor(60, 140, 235);  // BGR: warm orange
inline const cv::Scalar kDarkColor(150, 80, 30);    // BGR: deep blue
inline const cv::Scalar kAxisColor(60, 60, 60);
inline const cv::Scalar kGridColor(220, 220, 220);

// Plot area with linear value->pixel mapping and a footer line for the
// resolved config hash.
class Canvas {
 public:
  Canvas(int width, int height, const std::string& title, const std::string& footer)
      : mat_(height, width, CV_8UC3, cv::Scalar(255, 255, 255)),
        left_(70),
        right_(width - 25),
        top_(45),
        bottom_(height - 55) {
    cv::putText(mat_, title, {15, 28}, cv::FONT_HERSHEY_SIMPLEX, 0.55, kAxisColor, 1, cv::LINE_AA);
    if (!footer.empty()) {
      cv::putText(mat_, footer, {15, height - 10}, cv::FONT_HERSHEY_SIMPLEX, 0.35,
                  cv::Scalar(140, 140, 140), 1, cv::LINE_AA);
    }
  }

  void set_range(double x_min, double x_max, double y_min, double y_max) {
    const auto widen = [](double& lo, double& hi) {
      if (hi <= lo) hi = lo + 1.0;
      const double m = 0.05 * (hi - lo);
      lo -= m;
      hi += m;
    };
    x_min_ = x_min;
    x_max_ = x_max;
    y_min_ = y_min;
    y_max_ = y_max;
    widen(x_min_, x_max_);
    widen(y_min_, y_max_);
  }

  int px(double x) const {
    return left_ + static_cast<int>((x - x_min_) / (x_max_ - x_min_) *
                                    static_cast<double>(right_ - left_));
  }
  int py(double y) const {
    return bottom_ - static_cast<int>((y - y_min_) / (y_max_ - y_min_) *
                                      static_cast<double>(bottom_ - top_));
  }

  void draw_axes(const std::string& x_label, const std::string& y_label, int y_ticks = 5) {
    cv::rectangle(mat_, {left_, top_}, {right_, bottom_}, kAxisColor, 1);
    for (int t = 0; t <= y_ticks; ++t) {
      const double v = y_min_ + (y_max_ - y_min_) * static_cast<double>(t) / y_ticks;
      const int y = py(v);
      cv::line(mat_, {left_, y}, {right_, y}, kGridColor, 1);
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%.3g", v);
      cv::putText(mat_, buf, {6, y + 4}, cv::FONT_HERSHEY_SIMPLEX, 0.35, kAxisColor, 1,
                  cv::LINE_AA);
    }
    cv::putText(mat_, x_label, {(left_ + right_) / 2 - 40, bottom_ + 32}, cv::FONT_HERSHEY_SIMPLEX,
                0.45, kAxisColor, 1, cv::LINE_AA);
    cv::putText(mat_, y_label, {6, top_ - 8}, cv::FONT_HERSHEY_SIMPLEX, 0.4, kAxisColor, 1,
                cv::LINE_AA);
  }

  void x_category_label(double x, const std::string& text) {
    cv::putText(mat_, text, {px(x) - 28, bottom_ + 18}, cv::FONT_HERSHEY_SIMPLEX, 0.42, kAxisColor,
                1, cv::LINE_AA);
  }

  void box(double x_center, double half_width, const BoxStats& b, const cv::Scalar& color) {
    const int xl = px(x_center - half_width), xr = px(x_center + half_width), xc = px(x_center);
    cv::line(mat_, {xc, py(b.min)}, {xc, py(b.q1)}, color, 1, cv::LINE_AA);
    cv::line(mat_, {xc, py(b.q3)}, {xc, py(b.max)}, color, 1, cv::LINE_AA);
    cv::rectangle(mat_, {xl, py(b.q3)}, {xr, py(b.q1)}, color, 1, cv::LINE_AA);
    cv::line(mat_, {xl, py(b.median)}, {xr, py(b.median)}, color, 2, cv::LINE_AA);
    const int cap = (xr - xl) / 3;
    cv::line(mat_, {xc - cap, py(b.min)}, {xc + cap, py(b.min)}, color, 1, cv::LINE_AA);
    cv::line(mat_, {xc - cap, py(b.max)}, {xc + cap, py(b.max)}, color, 1, cv::LINE_AA);
  }

  void point(double x, double y, const cv::Scalar& color, int radius = 3) {
    cv::circle(mat_, {px(x), py(y)}, radius, color, cv::FILLED, cv::LINE_AA);
  }

  void bar(double x_center, double half_width, double value, const cv::Scalar& color) {
    cv::rectangle(mat_, {px(x_center - half_width), py(value)}, {px(x_center + half_width), py(0.0)},
                  color, cv::FILLED);
  }

  void diagonal() {
    const double lo = std::max(x_min_, y_min_), hi = std::min(x_max_, y_max_);
    cv::line(mat_, {px(lo), py(lo)}, {px(hi), py(hi)}, cv::Scalar(120, 120, 120), 1, cv::LINE_AA);
  }

  void legend(const std::vector<std::pair<std::string, cv::Scalar>>& items) {
    int y = top_ + 16;
    for (const auto& [text, color] : items) {
      cv::rectangle(mat_, {right_ - 120, y - 9}, {right_ - 106, y + 2}, color, cv::FILLED);
      cv::putText(mat_, text, {right_ - 100, y + 2}, cv::FONT_HERSHEY_SIMPLEX, 0.4, kAxisColor, 1,
                  cv::LINE_AA);
      y += 18;
    }
  }

  void save(const std::string& path) const {
    if (!cv::imwrite(path, mat_)) throw std::runtime_error("cannot write figure '" + path + "'");
  }

 private:
  cv::Mat mat_;
  int left_, right_, top_, bottom_;
  double x_min_ = 0, x_max_ = 1, y_min_ = 0, y_max_ = 1;
};

// Bar chart of labeled counts (the FST histogram).
inline void bar_chart(const std::string& path, const std::string& title,
                      const std::vector<std::pair<std::string, double>>& bars,
                      const std::string& footer) {
  Canvas c(640, 420, title, footer);
  double top = 1.0;
  for (const auto& [label, v] : bars) top = std::max(top, v);
  c.set_range(-0.6, static_cast<double>(bars.size()) - 0.4, 0.0, top);
  c.draw_axes("", "count");
  for (std::size_t i = 0; i < bars.size(); ++i) {
    c.bar(static_cast<double>(i), 0.3, bars[i].second, cv::Scalar(120, 120, 120));
    c.x_category_label(static_cast<double>(i), bars[i].first);
  }
  c.save(path);
}

// Side-by-side light/dark boxplots per configuration (the Fig. 3 / Fig. 4
// layout).
inline void grouped_boxplot(const std::string& path, const std::string& title,
                            const std::string& metric_label,
                            const std::vector<std::string>& configs,
                            const std::map<std::string, std::map<std::string, BoxStats>>& cells,
                            const std::string& footer) {
  Canvas c(720, 440, title, footer);
  double lo = 1e300, hi = -1e300;
  for (const auto& config : configs) {
    auto it = cells.find(config);
    if (it == cells.end()) continue;
    for (const auto& [group, b] : it->second) {
      if (b.count == 0) continue;
      lo = std::min(lo, b.min);
      hi = std::max(hi, b.max);
    }
  }
  if (lo > hi) {
    lo = 0;
    hi = 1;
  }
  c.set_range(-0.6, static_cast<double>(configs.size()) - 0.4, std::min(0.0, lo), hi);
  c.draw_axes("training configuration", metric_label);
  for (std::size_t i = 0; i < configs.size(); ++i) {
    auto it = cells.find(configs[i]);
    if (it == cells.end()) continue;
    const double x = static_cast<double>(i);
    auto light = it->second.find("light");
    auto dark = it->second.find("dark");
    if (light != it->second.end() && light->second.count > 0)
      c.box(x - 0.17, 0.12, light->second, kLightColor);
    if (dark != it->second.end() && dark->second.count > 0)
      c.box(x + 0.17, 0.12, dark->second, kDarkColor);
    c.x_category_label(x, configs[i]);
  }
  c.legend({{"light (FST 1-2)", kLightColor}, {"dark (FST 5-6)", kDarkColor}});
  c.save(path);
}

// Scatter of per-condition values for light (x) vs dark (y) with the y=x
// reference line. Multiple labeled series share the canvas.
inline void xy_scatter(const std::string& path, const std::string& title,
                       const std::string& x_label, const std::string& y_label,
                       const std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>>& series,
                       const std::string& footer) {
  Canvas c(560, 540, title, footer);
  double hi = 1e-9;
  for (const auto& [label, pts] : series) {
    for (const auto& [x, y] : pts) hi = std::max({hi, x, y});
  }
  c.set_range(0.0, hi, 0.0, hi);
  c.draw_axes(x_label, y_label);
  c.diagonal();
  const std::vector<cv::Scalar> palette = {cv::Scalar(60, 140, 235), cv::Scalar(150, 80, 30),
                                           cv::Scalar(90, 170, 90), cv::Scalar(170, 90, 170)};
  std::vector<std::pair<std::string, cv::Scalar>> legend;
  for (std::size_t s = 0; s < series.size(); ++s) {
    const auto& color = palette[s % palette.size()];
    for (const auto& [x, y] : series[s].second) c.point(x, y, color);
    legend.emplace_back(series[s].first, color);
  }
  if (series.size() > 1 || (series.size() == 1 && !series[0].first.empty())) c.legend(legend);
  c.save(path);
}

// Writes an image-grid tensor with a footer strip naming the rows and the
// config hash.
inline void save_grid(const std::string& path, const Tensorf& grid,
                      const std::vector<std::string>& row_labels, const std::string& footer) {
  const int h = static_cast<int>(grid.dim(1));
  const int w = static_cast<int>(grid.dim(2));
  const int label_w = row_labels.empty() ? 0 : 90;
  const int footer_h = footer.empty() ? 0 : 22;
  cv::Mat out(h + footer_h, w + label_w, CV_8UC3, cv::Scalar(255, 255, 255));
  for (int y = 0; y < h; ++y) {
    auto* row = out.ptr<cv::Vec3b>(y);
    for (int x = 0; x < w; ++x) {
      const auto to_u8 = [&](int ch) {
        const float v = std::min(1.0f, std::max(0.0f, grid.at(ch, y, x)));
        return static_cast<unsigned char>(std::lround(v * 255.0f));
      };
      row[x + label_w] = cv::Vec3b(to_u8(2), to_u8(1), to_u8(0));
    }
  }
  if (!row_labels.empty()) {
    const int rows = static_cast<int>(row_labels.size());
    const int row_h = h / std::max(1, rows);
    for (int r = 0; r < rows; ++r) {
      cv::putText(out, row_labels[static_cast<std::size_t>(r)], {4, r * row_h + row_h / 2 + 4},
                  cv::FONT_HERSHEY_SIMPLEX, 0.35, kAxisColor, 1, cv::LINE_AA);
    }
  }
  if (!footer.empty()) {
    cv::putText(out, footer, {4, h + footer_h - 7}, cv::FONT_HERSHEY_SIMPLEX, 0.35,
                cv::Scalar(140, 140, 140), 1, cv::LINE_AA);
  }
  if (!cv::imwrite(path, out)) throw std::runtime_error("cannot write figure '" + path + "'");
}

}  // namespace dermaudit::plot
