// Deterministic Fruchterman-Reingold layout. Nodes start on a circle in
// input order, so the same graph always lands in the same positions and
// DOM assertions stay stable. No randomness on purpose.

export interface Point {
  x: number;
  y: number;
}

export interface LayoutEdge {
  source: string;
  target: string;
}

export function springLayout(
  ids: string[],
  edges: LayoutEdge[],
  width = 640,
  height = 420,
  iterations = 250,
): Map<string, Point> {
  const positions = new Map<string, Point>();
  const n = ids.length;
  if (n === 0) return positions;
  if (n === 1) {
    positions.set(ids[0], { x: width / 2, y: height / 2 });
    return positions;
  }

  const radius = Math.min(width, height) * 0.35;
  ids.forEach((id, i) => {
    const angle = (2 * Math.PI * i) / n;
    positions.set(id, {
      x: width / 2 + radius * Math.cos(angle),
      y: height / 2 + radius * Math.sin(angle),
    });
  });

  const area = width * height;
  const k = Math.sqrt(area / n);
  let temperature = width / 10;
  const cooling = temperature / (iterations + 1);

  const disp = new Map<string, Point>();
  for (let step = 0; step < iterations; step++) {
    for (const id of ids) disp.set(id, { x: 0, y: 0 });

    // pairwise repulsion
    for (let i = 0; i < n; i++) {
      for (let j = i + 1; j < n; j++) {
        const a = positions.get(ids[i])!;
        const b = positions.get(ids[j])!;
        let dx = a.x - b.x;
        let dy = a.y - b.y;
        let dist = Math.sqrt(dx * dx + dy * dy);
        if (dist < 0.01) {
          // coincident points: push apart along a fixed direction
          dx = 0.01 * (i + 1);
          dy = 0.01;
          dist = Math.sqrt(dx * dx + dy * dy);
        }
        const force = (k * k) / dist;
        const da = disp.get(ids[i])!;
        const db = disp.get(ids[j])!;
        da.x += (dx / dist) * force;
        da.y += (dy / dist) * force;
        db.x -= (dx / dist) * force;
        db.y -= (dy / dist) * force;
      }
    }

    // spring attraction along edges
    for (const edge of edges) {
      const a = positions.get(edge.source);
      const b = positions.get(edge.target);
      if (!a || !b || a === b) continue;
      const dx = a.x - b.x;
      const dy = a.y - b.y;
      const dist = Math.max(Math.sqrt(dx * dx + dy * dy), 0.01);
      const force = (dist * dist) / k;
      const da = disp.get(edge.source)!;
      const db = disp.get(edge.target)!;
      da.x -= (dx / dist) * force;
      da.y -= (dy / dist) * force;
      db.x += (dx / dist) * force;
      db.y += (dy / dist) * force;
    }

    for (const id of ids) {
      const p = positions.get(id)!;
      const d = disp.get(id)!;
      const mag = Math.max(Math.sqrt(d.x * d.x + d.y * d.y), 0.01);
      const limited = Math.min(mag, temperature);
      p.x += (d.x / mag) * limited;
      p.y += (d.y / mag) * limited;
    }
    temperature -= cooling;
  }

  // scale into the viewport with a margin
  const margin = 40;
  let minX = Infinity;
  let maxX = -Infinity;
  let minY = Infinity;
  let maxY = -Infinity;
  for (const p of positions.values()) {
    minX = Math.min(minX, p.x);
    maxX = Math.max(maxX, p.x);
    minY = Math.min(minY, p.y);
    maxY = Math.max(maxY, p.y);
  }
  const spanX = Math.max(maxX - minX, 1);
  const spanY = Math.max(maxY - minY, 1);
  for (const p of positions.values()) {
    p.x = margin + ((p.x - minX) / spanX) * (width - 2 * margin);
    p.y = margin + ((p.y - minY) / spanY) * (height - 2 * margin);
  }
  return positions;
}
