// Minimal parser for the DOT text the explanation endpoint returns:
// an undirected graph whose statements are edge lines of the form
//   "a" -- "b" [penwidth=2.75, label="0.500"];
// plus a header and a node-defaults line, both of which are skipped.

export interface DotEdge {
  source: string;
  target: string;
  penwidth: number;
  label: string;
  dashed: boolean;
}

export interface DotGraph {
  nodes: string[];
  edges: DotEdge[];
}

const EDGE_LINE = /^"((?:[^"\\]|\\.)*)"\s*--\s*"((?:[^"\\]|\\.)*)"\s*\[(.*)\];?$/;

function unescape(raw: string): string {
  return raw.replace(/\\(.)/g, '$1');
}

// Split an attribute list on commas that are outside quoted values.
function splitAttrs(raw: string): string[] {
  const parts: string[] = [];
  let current = '';
  let inQuote = false;
  for (let i = 0; i < raw.length; i++) {
    const ch = raw[i];
    if (ch === '"' && raw[i - 1] !== '\\') inQuote = !inQuote;
    if (ch === ',' && !inQuote) {
      parts.push(current);
      current = '';
    } else {
      current += ch;
    }
  }
  if (current.trim().length > 0) parts.push(current);
  return parts;
}

function parseAttrs(raw: string): Record<string, string> {
  const attrs: Record<string, string> = {};
  for (const part of splitAttrs(raw)) {
    const eq = part.indexOf('=');
    if (eq < 0) continue;
    const key = part.slice(0, eq).trim();
    let value = part.slice(eq + 1).trim();
    if (value.startsWith('"') && value.endsWith('"')) {
      value = unescape(value.slice(1, -1));
    }
    attrs[key] = value;
  }
  return attrs;
}

export function parseDot(text: string): DotGraph {
  const trimmed = text.trim();
  if (!trimmed.startsWith('graph ')) {
    throw new Error('expected an undirected DOT graph');
  }
  if (!trimmed.endsWith('}')) {
    throw new Error('unterminated DOT graph');
  }

  const seen = new Set<string>();
  const nodes: string[] = [];
  const edges: DotEdge[] = [];

  for (const rawLine of trimmed.split('\n')) {
    const line = rawLine.trim();
    const match = EDGE_LINE.exec(line);
    if (!match) continue;
    const source = unescape(match[1]);
    const target = unescape(match[2]);
    const attrs = parseAttrs(match[3]);
    for (const id of [source, target]) {
      if (!seen.has(id)) {
        seen.add(id);
        nodes.push(id);
      }
    }
    edges.push({
      source,
      target,
      penwidth: Number(attrs.penwidth ?? '1'),
      label: attrs.label ?? '',
      dashed: attrs.style === 'dashed',
    });
  }

  return { nodes, edges };
}
