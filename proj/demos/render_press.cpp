// Minimal library walkthrough: build the synthetic sensor rig, press a
// sphere into the DIGIT pad, and render the resulting tactile image.
//
//   ./render_press out.ppm [depth_mm]

#include <iostream>

#include "across/render.hpp"
#include "across/synth.hpp"

using namespace across;

int main(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << "usage: render_press <out.ppm> [depth_mm]\n";
    return 2;
  }
  double depth = argc > 2 ? std::atof(argv[2]) : 1.2;

  synth::RigConfig cfg;
  cfg.biotac_vertices = 260;
  cfg.digit_vertices = 384;
  auto rig = synth::build_sensor_rig(cfg);

  Eigen::MatrixXd inward(rig.digit.positions.rows(), 3);
  inward.rowwise() = Eigen::RowVector3d(0, 0, -1);
  auto sphere = synth::Indenter::make(synth::IndenterKind::sphere);
  auto touch = synth::place_indenter(rig.digit.positions, sphere, Eigen::Vector3d(2.0, -1.0, 0.0),
                                     Eigen::Vector3d(0, 0, -1), 0.0);
  auto deformed = synth::deform_surface(rig.digit.positions, inward, touch, depth,
                                        rig.deform_config);

  mesh::MeshTopology topo(rig.digit.positions, rig.digit.triangles);
  mesh::SurfaceMesh surface{&topo, deformed.positions};
  render::RenderConfig rc;
  auto height = render::rasterize_heightmap(surface, rc);
  auto image = render::render_image(height, render::PhotometricTable::default_table(),
                                    render::synthetic_background(rc.width, rc.height));
  render::save_ppm(argv[1], render::pyramid_gaussian_blur(image));

  std::cout << "pressed " << depth << " mm, displaced " << deformed.contact_vertices
            << " contact vertices, wrote " << argv[1] << "\n";
  return 0;
}
