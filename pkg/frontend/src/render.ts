import type { CanvasState, Category, ResultTile } from './types.js'

/** Category colors; index modulo palette length. */
export const PALETTE = [
  '#e6194b', '#3cb44b', '#4363d8', '#f58231', '#911eb4',
  '#46f0f0', '#f032e6', '#bcf60c', '#fabebe', '#008080',
]

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, '&amp;')
    .replace(/</g, '&lt;')
    .replace(/>/g, '&gt;')
    .replace(/"/g, '&quot;')
}

export function categoryColor(category: number): string {
  return PALETTE[((category % PALETTE.length) + PALETTE.length) % PALETTE.length] as string
}

export function renderBoxes(state: CanvasState, categories: Category[]): string {
  const names = new Map(categories.map(c => [c.id, c.name]))
  return state.objects.map((obj, i) => {
    const { x, y, w, h } = obj.box
    const selected = state.selection === i ? ' selected' : ''
    const label = escapeHtml(names.get(obj.category) ?? `#${obj.category}`)
    return `<div class="box${selected}" data-index="${i}"` +
      ` style="left:${x}px;top:${y}px;width:${w}px;height:${h}px;` +
      `border-color:${categoryColor(obj.category)}">` +
      `<span class="label">${label}</span>` +
      `<span class="handle" data-index="${i}"></span></div>`
  }).join('')
}

export function renderResults(tiles: ResultTile[], thumbnailUrl: (p: string) => string): string {
  if (tiles.length === 0) return '<p class="empty">no results</p>'
  return tiles.map(tile =>
    `<figure class="tile" data-rank="${tile.rank}" data-score="${tile.score}">` +
    `<img src="${escapeHtml(thumbnailUrl(tile.thumbnail))}" alt="${escapeHtml(tile.id)}">` +
    `<figcaption>#${tile.rank} ${escapeHtml(tile.id)} ` +
    `<b>${tile.score.toFixed(4)}</b></figcaption></figure>`,
  ).join('')
}

export function renderBanner(error: string | null): string {
  return error ? `<div class="banner">${escapeHtml(error)}</div>` : ''
}

export function renderPalette(categories: Category[], active: number): string {
  return categories.map(c =>
    `<button class="cat${c.id === active ? ' active' : ''}" data-category="${c.id}"` +
    ` style="border-color:${categoryColor(c.id)}">${escapeHtml(c.name)}</button>`,
  ).join('')
}

/** Ranks parsed back out of a rendered grid, in document order. */
export function tileOrder(html: string): number[] {
  return [...html.matchAll(/data-rank="(\d+)"/g)].map(m => Number(m[1]))
}

export function tileScores(html: string): number[] {
  return [...html.matchAll(/data-score="([^"]+)"/g)].map(m => Number(m[1]))
}
